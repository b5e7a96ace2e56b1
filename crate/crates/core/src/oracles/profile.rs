//! JSON profiles for the reference oracle server.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backend, ConstantModel, EchoModel, LexiconModel, MajorityTokenModel, SimulatedLlm};
use crate::label::{Label, LabelKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleProfile {
    pub name: String,
    pub behavior: Behavior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    Echo { seq_len: usize },
    Constant { output: Label },
    Majority { classes: usize },
    /// Normalized vote counts of the majority rule, with add-one smoothing.
    SoftMajority { classes: usize },
    Lexicon(LexiconModel),
    PromptRouted(SimulatedLlm),
}

struct SoftMajority {
    classes: usize,
}

impl Backend for SoftMajority {
    fn kind(&self) -> LabelKind {
        LabelKind::Distribution
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        let mut counts = vec![1.0; self.classes];
        for &t in input {
            if let Some(c) = (t as usize).checked_sub(crate::label::FIRST_CONTENT as usize) {
                if c < self.classes {
                    counts[c] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        Ok(Label::Distribution(counts.into_iter().map(|c| c / total).collect()))
    }
}

impl OracleProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let profile: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.behavior {
            Behavior::Echo { seq_len } if *seq_len == 0 => Err(Error::Argument("echo seq_len must be positive".into())),
            Behavior::Majority { classes } | Behavior::SoftMajority { classes } if *classes < 2 => {
                Err(Error::Argument("at least two classes required".into()))
            }
            Behavior::PromptRouted(llm) => {
                if llm.classes < 2 {
                    return Err(Error::Argument("at least two classes required".into()));
                }
                if let Some(r) = llm.routes.iter().find(|r| r.task >= llm.tasks.len()) {
                    return Err(Error::Argument(format!("route targets unknown task {}", r.task)));
                }
                if !(0.0..=1.0).contains(&llm.noise) || llm.routes.iter().any(|r| !(0.0..=1.0).contains(&r.accuracy)) {
                    return Err(Error::Argument("probabilities must lie in [0, 1]".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn backend(&self) -> Arc<dyn Backend> {
        match &self.behavior {
            Behavior::Echo { seq_len } => Arc::new(EchoModel::new(*seq_len)),
            Behavior::Constant { output } => Arc::new(ConstantModel { output: output.clone() }),
            Behavior::Majority { classes } => Arc::new(MajorityTokenModel::new(*classes)),
            Behavior::SoftMajority { classes } => Arc::new(SoftMajority { classes: *classes }),
            Behavior::Lexicon(m) => Arc::new(m.clone()),
            Behavior::PromptRouted(m) => Arc::new(m.clone()),
        }
    }
}
