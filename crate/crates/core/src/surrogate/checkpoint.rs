use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use taskvec_autodiff::{ParamVector, Rng, Tensor};

use super::{param_specs, Init, SurrogateConfig};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TSKV1";

/// Serializes `value` as compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        use serde_json::Value;
        match v {
            Value::Object(map) => {
                let mut entries: Vec<(String, Value)> = map.into_iter().collect();
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                Value::Object(entries.into_iter().map(|(k, v)| (k, sort(v))).collect())
            }
            Value::Array(items) => Value::Array(items.into_iter().map(sort).collect()),
            other => other,
        }
    }
    Ok(serde_json::to_string(&sort(serde_json::to_value(value)?))?)
}

/// Surrogate configuration plus weights, identified by a content fingerprint.
#[derive(Clone, Debug)]
pub struct SurrogateCheckpoint {
    pub config: SurrogateConfig,
    pub params: ParamVector,
    fingerprint: String,
}

impl PartialEq for SurrogateCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
    }
}

impl SurrogateCheckpoint {
    /// Wraps `params` after checking names and shapes against `config`.
    pub fn new(config: SurrogateConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(params.iter())
                .any(|(s, (name, t))| s.name != name || s.shape != t.shape())
        {
            return Err(Error::Format("parameter layout does not match the configuration".into()));
        }
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("checkpoint contains non-finite weights".into()));
        }
        let fingerprint = fingerprint(&config, &params)?;
        Ok(Self {
            config,
            params,
            fingerprint,
        })
    }

    /// Fresh random weights: dense layers `N(0, 1/fan_in)`, embeddings
    /// `N(0, 1)`, layer-norm gains one, biases zero.
    pub fn init(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0x5u64);
        let mut params = ParamVector::new();
        for spec in param_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { scale, fan_in } => {
                    let std = scale / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.normal() * std).collect()
                }
            };
            params
                .register(spec.name, Tensor::new(spec.shape, data)?)
                .map_err(Error::from)?;
        }
        Self::new(config, params)
    }

    /// Same configuration with replaced weights.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.config, params)
    }

    /// Hex SHA-256 over the serialized configuration and weights.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `magic ‖ canonical JSON config ‖ '\n' ‖ little-endian f64 weights`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Format("not a surrogate checkpoint (bad magic)".into()))?;
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
        let config: SurrogateConfig = serde_json::from_slice(&rest[..newline])
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let payload = &rest[newline + 1..];
        let specs = param_specs(&config);
        let total: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut params = ParamVector::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            params.register(spec.name, Tensor::new(spec.shape, data)?)?;
        }
        Self::new(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn encode(config: &SurrogateConfig, params: &ParamVector) -> Result<Vec<u8>> {
    let header = canonical_json(config)?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + header.len() + 1 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn fingerprint(config: &SurrogateConfig, params: &ParamVector) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(config, params)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_preserves_fingerprint() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 11).unwrap();
        let back = SurrogateCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert!(back.params.bit_eq(&ckpt.params));
        assert_eq!(back.fingerprint(), ckpt.fingerprint());
        assert_eq!(back.fingerprint().len(), 64);
    }

    #[test]
    fn header_is_sorted_json() {
        let bytes = SurrogateCheckpoint::init(SurrogateConfig::default(), 1)
            .unwrap()
            .to_bytes()
            .unwrap();
        let end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = std::str::from_utf8(&bytes[5..end]).unwrap();
        assert_eq!(
            header,
            r#"{"classes":8,"ff_width":64,"heads":2,"layers":2,"max_len":32,"seq_len":8,"vocab":64,"width":32}"#
        );
    }

    #[test]
    fn init_is_seeded() {
        let c = SurrogateConfig::default();
        let a = SurrogateCheckpoint::init(c, 1).unwrap();
        let b = SurrogateCheckpoint::init(c, 1).unwrap();
        let d = SurrogateCheckpoint::init(c, 2).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), d.fingerprint());
    }

    #[test]
    fn single_weight_change_changes_fingerprint() {
        let a = SurrogateCheckpoint::init(SurrogateConfig::default(), 1).unwrap();
        let mut p = a.params.clone();
        p.tensor_mut(3).data_mut()[0] += 1e-12;
        assert_ne!(a.with_params(p).unwrap().fingerprint(), a.fingerprint());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = SurrogateCheckpoint::init(SurrogateConfig::default(), 1)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(matches!(SurrogateCheckpoint::from_bytes(b"XXXX1{}\n"), Err(Error::Format(_))));
        assert!(matches!(
            SurrogateCheckpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(SurrogateCheckpoint::from_bytes(&nan), Err(Error::Numeric(_))));
    }
}
