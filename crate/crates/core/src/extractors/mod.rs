//! Task-embedding extractors over the surrogate.
//!
//! `taskemb` fine-tunes every surrogate weight on a labeled set and keeps the
//! empirical Fisher diagonal. `tupate` trains a key/value attention prefix
//! with the backbone frozen and keeps the layer-averaged prefix. Both are
//! deterministic given the checkpoint, the data and the seed.

mod file;

pub use file::{read_embedding, validate_id, write_embedding};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taskvec_autodiff::{objective, value_and_grad};

use crate::label::LabeledSet;
use crate::surrogate::{
    fine_tune_full, fine_tune_prefix, PrefixParams, Surrogate, SurrogateCheckpoint, TrainConfig,
    DEFAULT_PREFIX_INIT_STD,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    TaskEmb,
    TuPaTE,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TaskEmb => "taskemb",
            Method::TuPaTE => "tupate",
        }
    }

    pub const ALL: [Method; 2] = [Method::TaskEmb, Method::TuPaTE];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taskemb" => Ok(Method::TaskEmb),
            "tupate" => Ok(Method::TuPaTE),
            other => Err(Error::Argument(format!("unknown method `{other}` (expected taskemb or tupate)"))),
        }
    }
}

/// Whether an embedding describes a labeled dataset or a model's outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Dte,
    Mte,
}

/// Full Fisher diagonal, or one mean per parameter tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Full,
    Reduced,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Pearson,
}

/// Extractor hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub method: Method,
    pub train: TrainConfig,
    pub prefix_len: usize,
    pub prefix_init_std: f64,
    /// Per-tensor means of the Fisher diagonal; `taskemb` only.
    pub reduced: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            method: Method::TaskEmb,
            train: TrainConfig::default(),
            prefix_len: 4,
            prefix_init_std: DEFAULT_PREFIX_INIT_STD,
            reduced: false,
        }
    }
}

impl ExtractorConfig {
    pub fn new(method: Method, train: TrainConfig) -> Self {
        Self {
            method,
            train,
            ..Self::default()
        }
    }

    /// Dataset recipe: [`TrainConfig::dataset`].
    pub fn dte(method: Method, seed: u64) -> Self {
        Self::new(method, TrainConfig::dataset(seed))
    }

    /// Model recipe over the pool: [`TrainConfig::model`].
    pub fn mte(method: Method, seed: u64) -> Self {
        Self::new(method, TrainConfig::model(seed))
    }

    pub fn layout(&self) -> Layout {
        if self.reduced && self.method == Method::TaskEmb {
            Layout::Reduced
        } else {
            Layout::Full
        }
    }
}

/// Who an embedding describes and under which id it is stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Origin {
    pub id: String,
    pub kind: EmbeddingKind,
    pub source: String,
    pub pool: Option<String>,
}

impl Origin {
    pub fn dataset(source: impl Into<String>) -> Self {
        let source = source.into();
        Self {
            id: source.clone(),
            kind: EmbeddingKind::Dte,
            source,
            pool: None,
        }
    }

    pub fn model(source: impl Into<String>, pool: impl Into<String>) -> Self {
        let source = source.into();
        Self {
            id: source.clone(),
            kind: EmbeddingKind::Mte,
            source,
            pool: Some(pool.into()),
        }
    }
}

/// Embedding metadata as written to `<id>.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub id: String,
    pub kind: EmbeddingKind,
    pub method: Method,
    pub layout: Layout,
    pub source: String,
    pub pool: Option<String>,
    pub fingerprint: String,
    pub dim: usize,
    pub seed: u64,
    pub epochs: usize,
    pub prefix_len: Option<usize>,
    /// Hex SHA-256 of the little-endian `f32` payload.
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub meta: EmbeddingMeta,
    pub values: Vec<f32>,
}

impl TaskEmbedding {
    pub(crate) fn assemble(values: Vec<f32>, ckpt: &SurrogateCheckpoint, cfg: &ExtractorConfig, origin: Origin) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("embedding coordinate {i} is not finite")));
        }
        let meta = EmbeddingMeta {
            id: origin.id,
            kind: origin.kind,
            method: cfg.method,
            layout: cfg.layout(),
            source: origin.source,
            pool: origin.pool,
            fingerprint: ckpt.fingerprint().to_owned(),
            dim: values.len(),
            seed: cfg.train.seed,
            epochs: cfg.train.epochs,
            prefix_len: (cfg.method == Method::TuPaTE).then_some(cfg.prefix_len),
            payload_sha256: payload_hash(&values),
        };
        Ok(Self { meta, values })
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Little-endian `f32` payload.
    pub fn payload(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Fails unless `self` and `other` live in the same embedding space.
    pub fn check_compatible(&self, other: &TaskEmbedding) -> Result<()> {
        let (a, b) = (&self.meta, &other.meta);
        if a.method != b.method {
            return Err(Error::IncompatibleSpace(format!(
                "`{}` uses {} but `{}` uses {}",
                a.id, a.method, b.id, b.method
            )));
        }
        if a.fingerprint != b.fingerprint {
            return Err(Error::IncompatibleSpace(format!(
                "`{}` and `{}` come from different surrogates ({} vs {})",
                a.id,
                b.id,
                short(&a.fingerprint),
                short(&b.fingerprint)
            )));
        }
        if a.layout != b.layout || self.dim() != other.dim() {
            return Err(Error::IncompatibleSpace(format!(
                "`{}` ({:?}, dim {}) and `{}` ({:?}, dim {}) differ in layout",
                a.id,
                a.layout,
                self.dim(),
                b.id,
                b.layout,
                other.dim()
            )));
        }
        Ok(())
    }
}

fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}

pub(crate) fn payload_hash(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Empirical Fisher diagonal `(1/n) Σᵢ gᵢ⊙gᵢ` with `gᵢ = ∇ log P(yᵢ|xᵢ)` at
/// the checkpoint's weights, in canonical parameter order.
pub fn taskemb_fisher(ckpt: &SurrogateCheckpoint, data: &LabeledSet) -> Result<Vec<f64>> {
    data.kind()?;
    let model = Surrogate::new(ckpt.config)?;
    let mut acc = vec![0.0f64; ckpt.params.numel()];
    for (i, ex) in data.examples.iter().enumerate() {
        ckpt.config.validate_example(ex)?;
        let f = objective(|_, v| model.log_prob_var(v, None, ex));
        let (_, g) = value_and_grad(f, &ckpt.params).map_err(|e| match Error::from(e) {
            Error::Numeric(m) => Error::Numeric(format!("example {i}: {m}")),
            other => other,
        })?;
        let mut k = 0;
        for t in g.tensors() {
            for &x in t.data() {
                acc[k] += x * x;
                k += 1;
            }
        }
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Mean of each tensor's block of a flattened diagonal.
fn per_tensor_means(ckpt: &SurrogateCheckpoint, diag: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ckpt.params.len());
    let mut start = 0;
    for t in ckpt.params.tensors() {
        let block = &diag[start..start + t.len()];
        out.push(block.iter().sum::<f64>() / block.len() as f64);
        start += t.len();
    }
    out
}

/// Fine-tunes the whole surrogate on `data`, then embeds the Fisher diagonal.
pub fn taskemb_extract(ckpt: &SurrogateCheckpoint, data: &LabeledSet, cfg: &ExtractorConfig, origin: Origin) -> Result<TaskEmbedding> {
    data.kind()?;
    let tuned = fine_tune_full(ckpt, data, &cfg.train)?;
    let diag = taskemb_fisher(&tuned, data)?;
    let diag = match cfg.layout() {
        Layout::Full => diag,
        Layout::Reduced => per_tensor_means(&tuned, &diag),
    };
    let values = diag.into_iter().map(|v| v as f32).collect();
    let cfg = ExtractorConfig {
        method: Method::TaskEmb,
        ..*cfg
    };
    TaskEmbedding::assemble(values, ckpt, &cfg, origin)
}

/// `flatten(mean_l K_l) ‖ flatten(mean_l V_l)`, dimension `2·p·width`.
pub fn prefix_embedding(prefix: &PrefixParams, layers: usize) -> Vec<f64> {
    let n = prefix.len * prefix.params.tensor(0).cols();
    let mut out = vec![0.0; 2 * n];
    for l in 0..layers {
        for (o, v) in out[..n].iter_mut().zip(prefix.key(l).data()) {
            *o += v;
        }
        for (o, v) in out[n..].iter_mut().zip(prefix.value(l).data()) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= layers as f64);
    out
}

/// Trains a prefix on `data` against the frozen surrogate and embeds its
/// layer average.
pub fn tupate_extract(ckpt: &SurrogateCheckpoint, data: &LabeledSet, cfg: &ExtractorConfig, origin: Origin) -> Result<TaskEmbedding> {
    data.kind()?;
    let prefix = fine_tune_prefix(ckpt, data, cfg.prefix_len, cfg.prefix_init_std, &cfg.train)?;
    let values = prefix_embedding(&prefix, ckpt.config.layers)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let cfg = ExtractorConfig {
        method: Method::TuPaTE,
        ..*cfg
    };
    TaskEmbedding::assemble(values, ckpt, &cfg, origin)
}

/// Dispatches on `cfg.method`.
pub fn extract(ckpt: &SurrogateCheckpoint, data: &LabeledSet, cfg: &ExtractorConfig, origin: Origin) -> Result<TaskEmbedding> {
    match cfg.method {
        Method::TaskEmb => taskemb_extract(ckpt, data, cfg, origin),
        Method::TuPaTE => tupate_extract(ckpt, data, cfg, origin),
    }
}

/// Cosine of two raw vectors in 64-bit arithmetic.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::IncompatibleSpace(format!("dimensions {} and {} differ", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero vector has no direction".into()));
    }
    // sqrt(x·x) is exact, so identical vectors give exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of two raw vectors.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::IncompatibleSpace(format!("dimensions {} and {} differ", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateEmbedding("constant vector has no correlation".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Similarity of two compatible embeddings.
pub fn similarity(a: &TaskEmbedding, b: &TaskEmbedding, measure: Similarity) -> Result<f64> {
    a.check_compatible(b)?;
    let r = match measure {
        Similarity::Cosine => cosine(&a.values, &b.values),
        Similarity::Pearson => pearson(&a.values, &b.values),
    };
    r.map_err(|e| match e {
        Error::DegenerateEmbedding(m) => Error::DegenerateEmbedding(format!("`{}` vs `{}`: {m}", a.id(), b.id())),
        other => other,
    })
}

pub fn cosine_similarity(a: &TaskEmbedding, b: &TaskEmbedding) -> Result<f64> {
    similarity(a, b, Similarity::Cosine)
}
