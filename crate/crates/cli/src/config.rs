//! Run configuration: a JSON file, then flags on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskvec::benchmarks::{PromptBenchConfig, TransferBenchConfig};
use taskvec::extractors::{ExtractorConfig, Method, Similarity};
use taskvec::surrogate::{SurrogateConfig, TrainConfig, DEFAULT_PREFIX_INIT_STD};

/// Environment variable naming the store root when `--store` is absent.
pub const STORE_ENV: &str = "TASKVEC_STORE";

/// Invalid or unreadable configuration. Exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Optimizer recipe without a seed; every seed derives from [`RunConfig::seed`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Recipe {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }

    fn from_train(t: TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

impl Default for Recipe {
    fn default() -> Self {
        Self::from_train(TrainConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSettings {
    pub method: Method,
    pub dte: Recipe,
    pub mte: Recipe,
    pub prefix_len: usize,
    pub prefix_init_std: f64,
    pub reduced: bool,
    pub similarity: Similarity,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        Self {
            method: Method::TaskEmb,
            dte: Recipe::from_train(TrainConfig::dataset(0)),
            mte: Recipe::from_train(TrainConfig::model(0)),
            prefix_len: 4,
            prefix_init_std: DEFAULT_PREFIX_INIT_STD,
            reduced: false,
            similarity: Similarity::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSettings {
    /// Texts sampled per source before deduplication.
    pub cap: usize,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { cap: 300 }
    }
}

/// Everything a subcommand needs besides its own arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub surrogate: SurrogateConfig,
    /// Seeds surrogate init, pretraining, pool sampling and extraction.
    pub seed: u64,
    pub pretrain: Recipe,
    pub pool: PoolSettings,
    pub extractor: ExtractorSettings,
    pub store: Option<PathBuf>,
    /// Root under which run directories are created.
    pub out: PathBuf,
    pub jobs: usize,
    pub oracle_timeout_ms: u64,
    pub transfer: TransferBenchConfig,
    pub prompt: PromptBenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateConfig::default(),
            seed: 0,
            pretrain: Recipe {
                epochs: 1,
                ..Recipe::default()
            },
            pool: PoolSettings::default(),
            extractor: ExtractorSettings::default(),
            store: None,
            out: PathBuf::from("runs"),
            jobs: 1,
            oracle_timeout_ms: 10_000,
            transfer: TransferBenchConfig::default(),
            prompt: PromptBenchConfig::default(),
        }
    }
}

/// Flag values that override the file. `None` keeps the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub store: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn dte_config(&self) -> ExtractorConfig {
        self.extractor_with(self.extractor.dte)
    }

    pub fn mte_config(&self) -> ExtractorConfig {
        self.extractor_with(self.extractor.mte)
    }

    fn extractor_with(&self, recipe: Recipe) -> ExtractorConfig {
        ExtractorConfig {
            method: self.extractor.method,
            train: recipe.with_seed(self.seed),
            prefix_len: self.extractor.prefix_len,
            prefix_init_std: self.extractor.prefix_init_std,
            reduced: self.extractor.reduced,
        }
    }

    pub fn store_root(&self) -> Result<&Path, ConfigError> {
        self.store
            .as_deref()
            .ok_or_else(|| ConfigError(format!("no store: pass --store or set {STORE_ENV}")))
    }

    /// Applies flags. `--seed` and `--method` also narrow the benchmarks to
    /// that single experiment seed and extractor.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.store {
            self.store = Some(s.clone());
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.transfer.seeds = vec![seed];
            self.prompt.seeds = vec![seed];
        }
        if let Some(m) = o.method {
            self.extractor.method = m;
            self.transfer.methods = vec![m];
            self.prompt.methods = vec![m];
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, r: taskvec::Result<()>| r.map_err(|e| ConfigError(format!("{what}: {e}")));
        wrap("surrogate", self.surrogate.validate())?;
        wrap("transfer", self.transfer.validate())?;
        wrap("prompt", self.prompt.validate())?;
        if self.jobs == 0 {
            return Err(ConfigError("jobs must be at least 1".into()));
        }
        if self.pool.cap == 0 {
            return Err(ConfigError("pool.cap must be positive".into()));
        }
        if self.oracle_timeout_ms == 0 {
            return Err(ConfigError("oracle_timeout_ms must be positive".into()));
        }
        for (name, r) in [("pretrain", self.pretrain), ("extractor.dte", self.extractor.dte), ("extractor.mte", self.extractor.mte)] {
            if r.batch_size == 0 || !(r.lr.is_finite() && r.lr > 0.0) {
                return Err(ConfigError(format!("{name}: batch_size and lr must be positive")));
            }
        }
        if self.extractor.method == Method::TuPaTE && self.extractor.prefix_len == 0 {
            return Err(ConfigError("extractor.prefix_len must be positive for tupate".into()));
        }
        if !(self.extractor.prefix_init_std.is_finite() && self.extractor.prefix_init_std >= 0.0) {
            return Err(ConfigError("extractor.prefix_init_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Reads `path` (if any), applies `overrides` and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
