use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::families::{FamilyId, FAMILY_VOCAB};
use crate::label::LabeledSet;
use crate::oracles::{Backend, BagModel, ModelOracle, SurrogateModel};
use crate::surrogate::{fine_tune_full, SurrogateCheckpoint, SurrogateConfig, TrainConfig};
use crate::{Error, Result};

/// Model families of the benchmark zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Two-layer transformer of the surrogate's shape.
    TransformerBase,
    /// One-layer, single-head, half-width transformer.
    TransformerNarrow,
    /// Bag-of-tokens linear model.
    Bag,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::TransformerBase, Architecture::TransformerNarrow, Architecture::Bag];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::TransformerBase => "transformer-base",
            Architecture::TransformerNarrow => "transformer-narrow",
            Architecture::Bag => "bag",
        }
    }

    /// Transformer shape for this architecture; heads sizes follow `base`.
    pub fn transformer_config(self, base: &SurrogateConfig) -> Option<SurrogateConfig> {
        match self {
            Architecture::TransformerBase => Some(SurrogateConfig {
                width: 32,
                layers: 2,
                heads: 2,
                ff_width: 64,
                ..*base
            }),
            Architecture::TransformerNarrow => Some(SurrogateConfig {
                width: 16,
                layers: 1,
                heads: 1,
                ff_width: 32,
                ..*base
            }),
            Architecture::Bag => None,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training recipe of zoo models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooTraining {
    pub transformer_epochs: usize,
    pub transformer_lr: f64,
    pub bag_epochs: usize,
    pub bag_lr: f64,
    pub batch_size: usize,
}

impl Default for ZooTraining {
    fn default() -> Self {
        Self {
            transformer_epochs: 6,
            transformer_lr: 3e-3,
            bag_epochs: 20,
            bag_lr: 3e-2,
            batch_size: 16,
        }
    }
}

/// Trains one zoo model on `data` and wraps it as an oracle named `id`.
pub fn train_zoo_model(
    id: String,
    arch: Architecture,
    family: FamilyId,
    heads: &SurrogateConfig,
    data: &LabeledSet,
    recipe: &ZooTraining,
    seed: u64,
) -> Result<ModelOracle> {
    if heads.vocab < FAMILY_VOCAB as usize {
        return Err(Error::Argument(format!(
            "task families need vocab ≥ {FAMILY_VOCAB}, surrogate has {}",
            heads.vocab
        )));
    }
    let kind = family.kind();
    let backend: Arc<dyn Backend> = match arch.transformer_config(heads) {
        Some(config) => {
            let init = SurrogateCheckpoint::init(config, seed)?;
            let cfg = TrainConfig {
                epochs: recipe.transformer_epochs,
                batch_size: recipe.batch_size,
                lr: recipe.transformer_lr,
                seed,
            };
            Arc::new(SurrogateModel {
                ckpt: fine_tune_full(&init, data, &cfg)?,
                prefix: None,
                kind,
            })
        }
        None => {
            let cfg = TrainConfig {
                epochs: recipe.bag_epochs,
                batch_size: recipe.batch_size,
                lr: recipe.bag_lr,
                seed,
            };
            let model = BagModel::init(kind, heads.vocab, heads.classes, heads.seq_len, seed)?;
            Arc::new(model.train(data, &cfg)?)
        }
    };
    Ok(ModelOracle::new(id, backend))
}
