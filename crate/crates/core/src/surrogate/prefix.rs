use taskvec_autodiff::{ParamVector, Rng, Tensor};

use super::SurrogateConfig;
use crate::{Error, Result};

/// Trainable key/value prefixes, one `len × width` pair per layer, stored as
/// `[K_0, V_0, K_1, V_1, …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixParams {
    pub len: usize,
    pub params: ParamVector,
}

impl PrefixParams {
    /// A zero-length prefix; attention behaves exactly as without one.
    pub fn empty() -> Self {
        Self {
            len: 0,
            params: ParamVector::new(),
        }
    }

    /// Prefix entries drawn from `N(0, std²)`.
    pub fn init(config: &SurrogateConfig, len: usize, seed: u64, std: f64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Argument("prefix length must be positive".into()));
        }
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::Argument(format!("prefix init std {std} is invalid")));
        }
        let mut rng = Rng::derive(seed, 0x9e);
        let mut params = ParamVector::new();
        for l in 0..config.layers {
            for part in ["key", "value"] {
                let data = (0..len * config.width).map(|_| rng.normal() * std).collect();
                params.register(format!("layer{l}.prefix_{part}"), Tensor::new(vec![len, config.width], data)?)?;
            }
        }
        Ok(Self { len, params })
    }

    /// Number of trainable prefix values (`2·len·width` per layer).
    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    pub(crate) fn check_against(&self, config: &SurrogateConfig) -> Result<()> {
        if self.len == 0 {
            return if self.params.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract("empty prefix carries tensors".into()))
            };
        }
        let ok = self.params.len() == 2 * config.layers
            && self
                .params
                .tensors()
                .iter()
                .all(|t| t.shape() == [self.len, config.width]);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("prefix shape does not match the surrogate".into()))
        }
    }

    /// `K_l` / `V_l` for layer `l`.
    pub fn key(&self, l: usize) -> &Tensor {
        self.params.tensor(2 * l)
    }

    pub fn value(&self, l: usize) -> &Tensor {
        self.params.tensor(2 * l + 1)
    }
}
