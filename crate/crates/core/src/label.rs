//! Supervised targets and labeled example sets.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const SEP: u32 = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: u32 = 3;

/// Tolerance on the total mass of a distribution label.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Class,
    Distribution,
    Scalar,
    Tokens,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Class => "class",
            LabelKind::Distribution => "distribution",
            LabelKind::Scalar => "scalar",
            LabelKind::Tokens => "tokens",
        }
    }
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(LabelKind::Class),
            "distribution" => Ok(LabelKind::Distribution),
            "scalar" => Ok(LabelKind::Scalar),
            "tokens" => Ok(LabelKind::Tokens),
            other => Err(Error::Argument(format!("unknown label kind `{other}`"))),
        }
    }
}

/// A target `y` (dataset label) or `ŷ` (model output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Distribution(Vec<f64>),
    Scalar(f64),
    /// At most `seq_len` ids; missing trailing positions count as padding.
    Tokens(Vec<u32>),
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Class(_) => LabelKind::Class,
            Label::Distribution(_) => LabelKind::Distribution,
            Label::Scalar(_) => LabelKind::Scalar,
            Label::Tokens(_) => LabelKind::Tokens,
        }
    }

    /// Checks the per-variant invariants against head sizes.
    pub fn validate(&self, classes: usize, seq_len: usize, vocab: usize) -> Result<()> {
        match self {
            Label::Class(c) if *c >= classes => Err(Error::Contract(format!(
                "class {c} outside head of size {classes}"
            ))),
            Label::Distribution(q) => {
                if q.len() != classes {
                    return Err(Error::Contract(format!(
                        "distribution has {} entries, head has {classes}",
                        q.len()
                    )));
                }
                if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Contract("distribution entries must be finite and non-negative".into()));
                }
                let total: f64 = q.iter().sum();
                if (total - 1.0).abs() > DISTRIBUTION_TOL {
                    return Err(Error::Contract(format!("distribution sums to {total}")));
                }
                Ok(())
            }
            Label::Scalar(y) if !y.is_finite() => Err(Error::Contract("scalar label is not finite".into())),
            Label::Tokens(t) => {
                if t.len() > seq_len {
                    return Err(Error::Contract(format!(
                        "token label has {} ids, sequence head emits {seq_len}",
                        t.len()
                    )));
                }
                if let Some(bad) = t.iter().find(|&&id| id as usize >= vocab) {
                    return Err(Error::Contract(format!("token id {bad} outside vocabulary {vocab}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Index of the most likely class for class-like labels.
    pub fn argmax_class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Distribution(q) => q
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: Label,
}

impl Example {
    pub fn new(tokens: Vec<u32>, label: Label) -> Self {
        Self { tokens, label }
    }
}

/// Ordered examples sharing one label kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub examples: Vec<Example>,
}

impl LabeledSet {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The shared label kind; errors on an empty or mixed set.
    pub fn kind(&self) -> Result<LabelKind> {
        let first = self
            .examples
            .first()
            .ok_or_else(|| Error::Argument("labeled set is empty".into()))?
            .label
            .kind();
        if let Some((i, e)) = self
            .examples
            .iter()
            .enumerate()
            .find(|(_, e)| e.label.kind() != first)
        {
            return Err(Error::Contract(format!(
                "mixed label kinds: example 0 is {first}, example {i} is {}",
                e.label.kind()
            )));
        }
        Ok(first)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[u32]> {
        self.examples.iter().map(|e| e.tokens.as_slice())
    }
}
