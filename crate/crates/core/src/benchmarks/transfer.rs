use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use taskvec_autodiff::mix;

use super::families::{family_inputs, gen_family, FamilyId, TaskFamily};
use super::metrics::{avg_rank, mean, ndcg, order_by, random_baseline, relevance, RelevanceMapping};
use super::zoo::{train_zoo_model, Architecture, ZooTraining};
use super::{experiment_key, pretrained_surrogate, MethodSummary};
use crate::extractors::{ExtractorConfig, Method, Similarity};
use crate::label::{Label, LabelKind, LabeledSet};
use crate::pipeline::{build_pool, parallel_map, rank_candidates, InvocationLedger, LedgerEntry, Pipeline, PoolSource};
use crate::store::EmbeddingStore;
use crate::surrogate::{fine_tune_full, predict, SurrogateCheckpoint, SurrogateConfig, TrainConfig};
use crate::{Error, Result};

/// Fine-tuning recipe of the two transfer stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Epochs on the source set; 0 makes the transfer stage a no-op.
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            source_epochs: 2,
            target_epochs: 4,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

impl TransferConfig {
    fn stage(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }
}

/// Target-family metric of `ckpt` on `test`: accuracy for class-like
/// labels, negative mean squared error for scalars, per-position token
/// accuracy for sequences. Whole-sequence exact match is almost always 0 at
/// benchmark scale, which would flatten every gain on sequence targets.
pub fn score(ckpt: &SurrogateCheckpoint, test: &LabeledSet) -> Result<f64> {
    let kind = test.kind()?;
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let mut total = 0.0;
    for ex in &test.examples {
        let pred = predict(ckpt, None, &ex.tokens, kind)?;
        total += match (&pred, &ex.label) {
            (Label::Scalar(p), Label::Scalar(y)) => -(p - y) * (p - y),
            (Label::Tokens(p), Label::Tokens(y)) if !y.is_empty() => {
                y.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
            }
            _ => (pred.argmax_class() == ex.label.argmax_class()) as u8 as f64,
        };
    }
    Ok(total / test.len() as f64)
}

fn check_sets(source: &LabeledSet, train: &LabeledSet, test: &LabeledSet) -> Result<()> {
    if source.is_empty() || train.is_empty() || test.is_empty() {
        return Err(Error::Argument("transfer gain needs non-empty source, target train and target test sets".into()));
    }
    if train.kind()? != test.kind()? {
        return Err(Error::Contract("target train and test splits carry different label kinds".into()));
    }
    source.kind()?;
    Ok(())
}

/// Mean over `seeds` of `score(source → target) − score(target only)` on
/// the target test split. Both arms share the target-stage seed.
pub fn measure_transfer_gain(
    ckpt: &SurrogateCheckpoint,
    source: &LabeledSet,
    target_train: &LabeledSet,
    target_test: &LabeledSet,
    cfg: &TransferConfig,
    seeds: &[u64],
) -> Result<f64> {
    check_sets(source, target_train, target_test)?;
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed required".into()));
    }
    let mut gains = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let transferred = fine_tune_full(ckpt, source, &cfg.stage(cfg.source_epochs, seed))?;
        let with = fine_tune_full(&transferred, target_train, &cfg.stage(cfg.target_epochs, seed))?;
        let without = fine_tune_full(ckpt, target_train, &cfg.stage(cfg.target_epochs, seed))?;
        gains.push(score(&with, target_test)? - score(&without, target_test)?);
    }
    Ok(mean(&gains))
}

/// Gains of every source on every target, sharing the source stage across
/// targets and the baseline arm across sources. `gains[s][t]`.
pub fn gain_table(
    ckpt: &SurrogateCheckpoint,
    sources: &[&LabeledSet],
    targets: &[(&LabeledSet, &LabeledSet)],
    cfg: &TransferConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed required".into()));
    }
    for s in sources {
        for (train, test) in targets {
            check_sets(s, train, test)?;
        }
    }
    let seed_items: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    let tuned_items: Vec<(usize, u64)> = (0..sources.len()).flat_map(|s| seeds.iter().map(move |&x| (s, x))).collect();
    let tuned = parallel_map(jobs, &tuned_items, |&(s, seed)| fine_tune_full(ckpt, sources[s], &cfg.stage(cfg.source_epochs, seed)))?;
    let base_items: Vec<(usize, u64)> = (0..targets.len()).flat_map(|t| seeds.iter().map(move |&x| (t, x))).collect();
    let base = parallel_map(jobs, &base_items, |&(t, seed)| {
        let (train, test) = targets[t];
        score(&fine_tune_full(ckpt, train, &cfg.stage(cfg.target_epochs, seed))?, test)
    })?;
    let cells: Vec<(usize, usize, usize)> = (0..sources.len())
        .flat_map(|s| (0..targets.len()).flat_map(move |t| (0..seeds.len()).map(move |k| (s, t, k))))
        .collect();
    let with = parallel_map(jobs, &cells, |&(s, t, k)| {
        let (train, test) = targets[t];
        let start = &tuned[s * seeds.len() + k];
        score(&fine_tune_full(start, train, &cfg.stage(cfg.target_epochs, seed_items[k].1))?, test)
    })?;
    let mut table = vec![vec![0.0; targets.len()]; sources.len()];
    for (i, &(s, t, k)) in cells.iter().enumerate() {
        table[s][t] += (with[i] - base[t * seeds.len() + k]) / seeds.len() as f64;
    }
    Ok(table)
}

/// Full gain matrix with its row and column labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferGainTable {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `gain[source][target]`.
    pub gain: Vec<Vec<f64>>,
    pub metric: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
}

/// A zoo member: an architecture trained on a source family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooEntry {
    pub arch: Architecture,
    pub family: FamilyId,
}

impl ZooEntry {
    pub fn id(&self) -> String {
        format!("{}@{}", self.arch, self.family)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferBenchConfig {
    pub surrogate: SurrogateConfig,
    pub surrogate_seed: u64,
    /// Masked-LM epochs on the pool before any embedding is computed.
    pub pretrain_epochs: usize,
    pub families: Vec<FamilyId>,
    /// Explicit zoo; empty means every architecture on every family.
    pub zoo: Vec<ZooEntry>,
    pub zoo_training: ZooTraining,
    /// Source-set sizes are drawn per family from this inclusive range.
    pub source_train: [usize; 2],
    pub target_train: usize,
    pub test: usize,
    pub noise: f64,
    pub skew: f64,
    pub pool_cap: usize,
    pub methods: Vec<Method>,
    pub dte: TrainConfig,
    pub mte: TrainConfig,
    pub prefix_len: usize,
    pub transfer: TransferConfig,
    pub gain_seeds: usize,
    pub seeds: Vec<u64>,
    pub relevance: RelevanceMapping,
    pub random_trials: usize,
}

impl Default for TransferBenchConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateConfig::default(),
            surrogate_seed: 0,
            pretrain_epochs: 1,
            families: vec![
                FamilyId::MajorityClass,
                FamilyId::SentimentLexicon,
                FamilyId::TokenCountRegression,
                FamilyId::FillMaskSeq,
            ],
            zoo: Vec::new(),
            zoo_training: ZooTraining::default(),
            source_train: [128, 384],
            target_train: 32,
            test: 200,
            noise: 0.0,
            skew: 0.0,
            pool_cap: 100,
            methods: Method::ALL.to_vec(),
            dte: TrainConfig::dataset(0),
            mte: TrainConfig::model(0),
            prefix_len: 4,
            transfer: TransferConfig::default(),
            gain_seeds: 3,
            seeds: vec![0, 1, 2, 3, 4],
            relevance: RelevanceMapping::MinMax,
            random_trials: 1000,
        }
    }
}

impl TransferBenchConfig {
    pub fn zoo_entries(&self) -> Vec<ZooEntry> {
        if !self.zoo.is_empty() {
            return self.zoo.clone();
        }
        self.families
            .iter()
            .flat_map(|&family| Architecture::ALL.into_iter().map(move |arch| ZooEntry { arch, family }))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        let mut fams = self.families.clone();
        fams.sort();
        fams.dedup();
        if fams.len() != self.families.len() || fams.len() < 2 {
            return Err(Error::Argument("transfer benchmark needs at least two distinct families".into()));
        }
        let zoo = self.zoo_entries();
        if zoo.iter().any(|z| !self.families.contains(&z.family)) {
            return Err(Error::Argument("zoo entries must train on configured families".into()));
        }
        if self.source_train[0] == 0 || self.source_train[0] > self.source_train[1] {
            return Err(Error::Argument("source_train must be a non-empty range of positive sizes".into()));
        }
        if self.methods.is_empty() || self.seeds.is_empty() || self.gain_seeds == 0 || self.random_trials == 0 {
            return Err(Error::Argument("methods, seeds, gain_seeds and random_trials must be non-empty".into()));
        }
        if self.pool_cap == 0 || self.target_train == 0 || self.test == 0 {
            return Err(Error::Argument("pool_cap, target_train and test must be positive".into()));
        }
        Ok(())
    }
}

/// One target of one experiment seed under one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub seed: u64,
    pub method: Method,
    pub target: String,
    /// Candidate ids in predicted order with their similarity.
    pub predicted: Vec<(String, f64)>,
    pub gains: BTreeMap<String, f64>,
    pub rank: usize,
    pub ndcg: f64,
    pub ndcg_degenerate: bool,
    pub random_rank: f64,
    pub random_ndcg: f64,
    pub data_size_rank: usize,
    pub data_size_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub benchmark: String,
    pub candidates: Vec<String>,
    pub targets: Vec<String>,
    pub summaries: Vec<MethodSummary>,
    pub gain_tables: Vec<TransferGainTable>,
    pub ledger: BTreeMap<String, LedgerEntry>,
    pub rows: Vec<TransferRow>,
}

/// Everything that is fixed within one experiment seed.
struct Setting {
    ckpt: SurrogateCheckpoint,
    source_sizes: Vec<usize>,
    sources: Vec<LabeledSet>,
    targets: Vec<(LabeledSet, LabeledSet)>,
    pool: crate::pipeline::UnsupervisedPool,
}

fn stream(seed: u64, tag: u64, i: usize) -> u64 {
    mix(mix(seed ^ tag.rotate_left(32)) ^ i as u64)
}

fn setting(cfg: &TransferBenchConfig, seed: u64) -> Result<Setting> {
    let fams = &cfg.families;
    let mut targets = Vec::new();
    let mut dedup = Vec::new();
    for (i, &family) in fams.iter().enumerate() {
        let spec = TaskFamily {
            noise: cfg.noise,
            skew: cfg.skew,
            ..TaskFamily::new(family, stream(seed, 1, i), cfg.target_train, cfg.test)
        };
        let (train, test) = gen_family(&spec)?;
        dedup.extend(train.inputs().chain(test.inputs()).map(<[u32]>::to_vec));
        targets.push((train, test));
    }
    let mut source_sizes = Vec::new();
    let mut sources = Vec::new();
    for (i, &family) in fams.iter().enumerate() {
        let [lo, hi] = cfg.source_train;
        let size = lo + (stream(seed, 2, i) % (hi - lo + 1) as u64) as usize;
        let spec = TaskFamily {
            noise: cfg.noise,
            skew: cfg.skew,
            ..TaskFamily::new(family, stream(seed, 3, i), size, 1)
        };
        sources.push(gen_family(&spec)?.0);
        source_sizes.push(size);
    }
    let pool_sources = fams
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            Ok(PoolSource {
                name: f.to_string(),
                texts: family_inputs(f, stream(seed, 4, i), cfg.skew, 2 * cfg.pool_cap)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = build_pool(&pool_sources, cfg.pool_cap, &dedup, stream(seed, 5, 0))?;
    pool.check_hygiene(&dedup)?;
    let ckpt = pretrained_surrogate(&cfg.surrogate, cfg.surrogate_seed, &pool, cfg.pretrain_epochs, seed)?;
    Ok(Setting {
        ckpt,
        source_sizes,
        sources,
        targets,
        pool,
    })
}

fn metric_name(kind: LabelKind) -> &'static str {
    match kind {
        LabelKind::Scalar => "neg-mse",
        LabelKind::Tokens => "exact-match",
        _ => "accuracy",
    }
}

/// Ranks zoo models for each target family by embedding similarity and
/// scores the rankings against measured transfer gains.
pub fn run_transfer_benchmark(cfg: &TransferBenchConfig, jobs: usize) -> Result<TransferReport> {
    cfg.validate()?;
    let ledger = InvocationLedger::new();
    let mut rows = Vec::new();
    let mut gain_tables = Vec::new();
    let zoo = cfg.zoo_entries();
    let candidates: Vec<String> = zoo.iter().map(ZooEntry::id).collect();
    let targets: Vec<String> = cfg.families.iter().map(|f| f.to_string()).collect();
    for &seed in &cfg.seeds {
        let s = setting(cfg, seed)?;
        let oracles = parallel_map(jobs, &zoo.iter().copied().enumerate().collect::<Vec<_>>(), |&(i, z)| {
            let f = cfg.families.iter().position(|&f| f == z.family).expect("validated");
            train_zoo_model(z.id(), z.arch, z.family, &cfg.surrogate, &s.sources[f], &cfg.zoo_training, stream(seed, 6, i))
        })?;
        let gain_seeds: Vec<u64> = (0..cfg.gain_seeds).map(|k| stream(seed, 7, k)).collect();
        let source_refs: Vec<&LabeledSet> = s.sources.iter().collect();
        let target_refs: Vec<(&LabeledSet, &LabeledSet)> = s.targets.iter().map(|(a, b)| (a, b)).collect();
        let family_gain = gain_table(&s.ckpt, &source_refs, &target_refs, &cfg.transfer, &gain_seeds, jobs)?;
        gain_tables.push(TransferGainTable {
            sources: targets.clone(),
            targets: targets.clone(),
            gain: family_gain.clone(),
            metric: cfg
                .families
                .iter()
                .map(|f| (f.to_string(), metric_name(f.kind()).to_owned()))
                .collect(),
            seeds: gain_seeds.clone(),
        });
        let source_of = |z: &ZooEntry| cfg.families.iter().position(|&f| f == z.family).expect("validated");

        for &method in &cfg.methods {
            let key = experiment_key("transfer", method, seed);
            let counters = ledger.experiment(&key);
            counters.set_dims(zoo.len() as u64, cfg.families.len() as u64);
            let store = EmbeddingStore::in_memory();
            let pipe = Pipeline::new(&s.ckpt, &store, &ledger)?;
            let extractor = |train: TrainConfig| ExtractorConfig {
                prefix_len: cfg.prefix_len,
                ..ExtractorConfig::new(method, TrainConfig { seed, ..train })
            };
            let mtes = parallel_map(jobs, &oracles, |o| pipe.compute_mte(&key, o, &s.pool, &extractor(cfg.mte)))?;
            let dtes = parallel_map(jobs, &cfg.families.iter().enumerate().collect::<Vec<_>>(), |&(t, f)| {
                pipe.compute_dte(&key, &format!("target:{f}"), &s.targets[t].0, &extractor(cfg.dte))
            })?;
            // Ground-truth grid: one evaluated cell per (candidate, target).
            counters.add_grid_evaluations((zoo.len() * cfg.families.len()) as u64);
            for (t, dte) in dtes.iter().enumerate() {
                let ranked = rank_candidates(dte, &mtes, Similarity::Cosine)?;
                let by_emb: BTreeMap<&str, String> = mtes.iter().map(|m| (m.id(), m.meta.source.clone())).collect();
                let predicted: Vec<(String, f64)> = ranked.into_iter().map(|(id, sim)| (by_emb[id.as_str()].clone(), sim)).collect();
                let order: Vec<String> = predicted.iter().map(|p| p.0.clone()).collect();
                let gains: BTreeMap<String, f64> = zoo.iter().map(|z| (z.id(), family_gain[source_of(z)][t])).collect();
                let rel = relevance(&gains, cfg.relevance);
                let fute = ndcg(&order, &rel)?;
                let random = random_baseline(&gains, &rel, cfg.random_trials, stream(seed, 8, t))?;
                let sizes: BTreeMap<String, f64> = zoo.iter().map(|z| (z.id(), s.source_sizes[source_of(z)] as f64)).collect();
                let by_size = order_by(&sizes);
                rows.push(TransferRow {
                    seed,
                    method,
                    target: targets[t].clone(),
                    rank: avg_rank(&order, &gains)?,
                    ndcg: fute.value,
                    ndcg_degenerate: fute.degenerate,
                    random_rank: random.avg_rank,
                    random_ndcg: random.ndcg,
                    data_size_rank: avg_rank(&by_size, &gains)?,
                    data_size_ndcg: ndcg(&by_size, &rel)?.value,
                    predicted,
                    gains,
                });
            }
        }
    }
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let r: Vec<&TransferRow> = rows.iter().filter(|r| r.method == m).collect();
            let col = |f: &dyn Fn(&TransferRow) -> f64| mean(&r.iter().map(|x| f(x)).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                avg_rank: col(&|x| x.rank as f64),
                ndcg: col(&|x| x.ndcg),
                random_avg_rank: col(&|x| x.random_rank),
                random_ndcg: col(&|x| x.random_ndcg),
                data_size_avg_rank: Some(col(&|x| x.data_size_rank as f64)),
                data_size_ndcg: Some(col(&|x| x.data_size_ndcg)),
                performance: None,
                performance_rate: None,
            }
        })
        .collect();
    Ok(TransferReport {
        benchmark: "transfer".into(),
        candidates,
        targets,
        summaries,
        gain_tables,
        ledger: ledger.snapshot(),
        rows,
    })
}

/// Outcome of the shared-space clustering probe for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub method: Method,
    /// `(oracle, other family)` pairs where the own-family DTE is closer.
    pub wins: usize,
    pub pairs: usize,
    pub fraction: f64,
    /// `(oracle, own similarity, best other similarity)`.
    pub detail: Vec<(String, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub bench: TransferBenchConfig,
    /// Training seeds per (architecture, family).
    pub training_seeds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            bench: TransferBenchConfig::default(),
            training_seeds: 3,
            seed: 0,
        }
    }
}

/// For every zoo oracle and every other family, checks whether the MTE is
/// closer to the DTE of the oracle's own family.
pub fn run_clustering_probe(cfg: &ProbeConfig, jobs: usize) -> Result<Vec<ProbeResult>> {
    let b = &cfg.bench;
    b.validate()?;
    if cfg.training_seeds == 0 {
        return Err(Error::Argument("training_seeds must be positive".into()));
    }
    let s = setting(b, cfg.seed)?;
    let zoo = b.zoo_entries();
    let items: Vec<(usize, ZooEntry)> = (0..cfg.training_seeds)
        .flat_map(|k| zoo.iter().map(move |&z| (k, z)))
        .collect();
    let oracles = parallel_map(jobs, &items, |&(k, z)| {
        let f = b.families.iter().position(|&f| f == z.family).expect("validated");
        let id = format!("{}#{k}", z.id());
        train_zoo_model(id, z.arch, z.family, &b.surrogate, &s.sources[f], &b.zoo_training, stream(cfg.seed, 9, k * 1000 + f * 10 + z.arch as usize))
    })?;
    let ledger = InvocationLedger::new();
    let mut out = Vec::new();
    for &method in &b.methods {
        let store = EmbeddingStore::in_memory();
        let pipe = Pipeline::new(&s.ckpt, &store, &ledger)?;
        let key = experiment_key("probe", method, cfg.seed);
        let extractor = |train: TrainConfig| ExtractorConfig {
            prefix_len: b.prefix_len,
            ..ExtractorConfig::new(method, TrainConfig { seed: cfg.seed, ..train })
        };
        let mtes = parallel_map(jobs, &oracles, |o| pipe.compute_mte(&key, o, &s.pool, &extractor(b.mte)))?;
        let dtes = parallel_map(jobs, &b.families.iter().enumerate().collect::<Vec<_>>(), |&(t, f)| {
            pipe.compute_dte(&key, &format!("family:{f}"), &s.targets[t].0, &extractor(b.dte))
        })?;
        let (mut wins, mut pairs) = (0, 0);
        let mut detail = Vec::new();
        for (mte, &(_, z)) in mtes.iter().zip(&items) {
            let own = b.families.iter().position(|&f| f == z.family).expect("validated");
            let sims = dtes
                .iter()
                .map(|d| crate::extractors::cosine_similarity(mte, d))
                .collect::<Result<Vec<_>>>()?;
            let mut best_other = f64::NEG_INFINITY;
            for (t, &sim) in sims.iter().enumerate() {
                if t != own {
                    pairs += 1;
                    wins += (sims[own] > sim) as usize;
                    best_other = best_other.max(sim);
                }
            }
            detail.push((mte.meta.source.clone(), sims[own], best_other));
        }
        out.push(ProbeResult {
            method,
            wins,
            pairs,
            fraction: wins as f64 / pairs as f64,
            detail,
        });
    }
    Ok(out)
}
