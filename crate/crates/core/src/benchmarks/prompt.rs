use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use taskvec_autodiff::{mix, Rng};

use super::families::{family_inputs, FamilyId, FAMILY_VOCAB};
use super::metrics::{avg_rank, mean, ndcg, performance_rate, random_baseline};
use super::{experiment_key, pretrained_surrogate, MethodSummary};
use crate::extractors::{ExtractorConfig, Method, Similarity};
use crate::label::{Example, Label, LabeledSet, FIRST_CONTENT};
use crate::oracles::{as_prompted_model, LexiconModel, ModelOracle, PromptSpec, Route, SimulatedLlm};
use crate::pipeline::{build_pool, parallel_map, rank_candidates, InvocationLedger, LedgerEntry, Pipeline, PoolSource};
use crate::store::EmbeddingStore;
use crate::surrogate::{SurrogateConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptBenchConfig {
    pub surrogate: SurrogateConfig,
    pub surrogate_seed: u64,
    pub pretrain_epochs: usize,
    /// Number of datasets, each a lexicon task over one shared input space.
    pub tasks: usize,
    /// Share of lexicon-weight variance common to all tasks.
    pub task_correlation: f64,
    pub prompts_per_task: usize,
    /// Prompts that route to no task and answer uniformly.
    pub vague_prompts: usize,
    /// Explicit prompt token lists; empty means generated. Routing is by
    /// position either way.
    pub prompts: Vec<Vec<u32>>,
    pub prompt_len: usize,
    pub llms: usize,
    pub matched_accuracy: f64,
    pub noise: f64,
    pub dataset_train: usize,
    pub test: usize,
    pub pool_cap: usize,
    pub methods: Vec<Method>,
    pub dte: TrainConfig,
    pub mte: TrainConfig,
    pub prefix_len: usize,
    pub seeds: Vec<u64>,
    pub random_trials: usize,
}

impl Default for PromptBenchConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateConfig::default(),
            surrogate_seed: 0,
            pretrain_epochs: 1,
            tasks: 3,
            task_correlation: 0.37,
            prompts_per_task: 4,
            vague_prompts: 1,
            prompts: Vec::new(),
            prompt_len: 3,
            llms: 2,
            matched_accuracy: 0.9,
            noise: 0.05,
            dataset_train: 256,
            test: 300,
            pool_cap: 300,
            methods: Method::ALL.to_vec(),
            dte: TrainConfig::dataset(0),
            mte: TrainConfig::model(0),
            prefix_len: 4,
            seeds: vec![0, 1, 2, 3, 4],
            random_trials: 1000,
        }
    }
}

impl PromptBenchConfig {
    pub fn prompt_count(&self) -> usize {
        self.tasks * self.prompts_per_task + self.vague_prompts
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        if self.surrogate.vocab < FAMILY_VOCAB as usize {
            return Err(Error::Argument(format!("prompt benchmark needs vocab ≥ {FAMILY_VOCAB}")));
        }
        if self.tasks == 0 || self.llms == 0 || self.prompt_count() < 2 {
            return Err(Error::Argument("need at least one task, one LLM and two prompts".into()));
        }
        if !self.prompts.is_empty() && self.prompts.len() != self.prompt_count() {
            return Err(Error::Argument(format!(
                "{} explicit prompts given, routing expects {}",
                self.prompts.len(),
                self.prompt_count()
            )));
        }
        if self.prompts.is_empty() && (self.prompt_len == 0 || 2 * self.prompt_len > self.surrogate.max_len) {
            return Err(Error::Argument("prompt_len must be in 1..=max_len/2".into()));
        }
        for p in [self.task_correlation, self.matched_accuracy, self.noise] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("{p} outside [0, 1]")));
            }
        }
        if self.dataset_train == 0 || self.test == 0 || self.pool_cap == 0 {
            return Err(Error::Argument("dataset_train, test and pool_cap must be positive".into()));
        }
        if self.methods.is_empty() || self.seeds.is_empty() || self.random_trials == 0 {
            return Err(Error::Argument("methods, seeds and random_trials must be non-empty".into()));
        }
        Ok(())
    }
}

/// Correlated lexicon tasks: `w_t = √ρ·z₀ + √(1−ρ)·z_t` per content token.
pub fn correlated_lexicons(tasks: usize, rho: f64, seed: u64) -> Vec<LexiconModel> {
    let mut rng = Rng::derive(seed, 0x1e8);
    let n = FAMILY_VOCAB as usize;
    let shared: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    (0..tasks)
        .map(|_| {
            let mut weights = vec![0.0; n];
            for (i, w) in weights.iter_mut().enumerate().skip(FIRST_CONTENT as usize) {
                *w = rho.sqrt() * shared[i] + (1.0 - rho).sqrt() * rng.normal();
            }
            LexiconModel { weights, bias: 0.0 }
        })
        .collect()
}

/// The task a prompt position routes to for LLM `llm`, if any.
fn routed_task(cfg: &PromptBenchConfig, prompt: usize, llm: usize) -> Option<usize> {
    (prompt < cfg.tasks * cfg.prompts_per_task).then(|| (prompt / cfg.prompts_per_task + llm) % cfg.tasks)
}

fn prompt_specs(cfg: &PromptBenchConfig, seed: u64) -> Vec<PromptSpec> {
    let mut rng = Rng::derive(seed, 0x9f);
    let mut seen = std::collections::HashSet::new();
    (0..cfg.prompt_count())
        .map(|i| {
            let tokens = match cfg.prompts.get(i) {
                Some(t) => t.clone(),
                None => loop {
                    let t: Vec<u32> = (0..cfg.prompt_len)
                        .map(|_| FIRST_CONTENT + rng.below((FAMILY_VOCAB - FIRST_CONTENT) as usize) as u32)
                        .collect();
                    if seen.insert(t.clone()) {
                        break t;
                    }
                },
            };
            let hint = match routed_task(cfg, i, 0) {
                Some(_) => format!("instruction {i}"),
                None => "vague instruction".into(),
            };
            PromptSpec {
                id: format!("p{i:02}"),
                tokens,
                hint,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub seed: u64,
    pub method: Method,
    pub llm: String,
    pub dataset: String,
    /// Prompt ids in predicted order with their similarity.
    pub predicted: Vec<(String, f64)>,
    /// Measured accuracy of every prompt on the dataset's test split.
    pub accuracy: BTreeMap<String, f64>,
    pub selected: String,
    pub performance: f64,
    pub performance_rate: f64,
    pub rank: usize,
    pub ndcg: f64,
    pub random_rank: f64,
    pub random_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub benchmark: String,
    pub prompts: Vec<PromptSpec>,
    pub summaries: Vec<MethodSummary>,
    pub ledger: BTreeMap<String, LedgerEntry>,
    pub rows: Vec<PromptRow>,
}

/// Selects, per (LLM, dataset), the prompt whose MTE is closest to the
/// dataset's DTE and scores the choice against measured accuracies.
pub fn run_prompt_benchmark(cfg: &PromptBenchConfig, jobs: usize) -> Result<PromptReport> {
    cfg.validate()?;
    let ledger = InvocationLedger::new();
    let mut rows = Vec::new();
    let mut prompts_seen = Vec::new();
    for &seed in &cfg.seeds {
        let lexicons = correlated_lexicons(cfg.tasks, cfg.task_correlation, seed);
        let prompts = prompt_specs(cfg, seed);
        let mut inputs = family_inputs(
            FamilyId::SentimentLexicon,
            mix(seed ^ 0xda7a),
            0.0,
            cfg.tasks * (cfg.dataset_train + cfg.test) + cfg.tasks * 2 * cfg.pool_cap,
        )?;
        let pool_inputs = inputs.split_off(cfg.tasks * (cfg.dataset_train + cfg.test));
        let mut datasets = Vec::new();
        for (t, lex) in lexicons.iter().enumerate() {
            let start = t * (cfg.dataset_train + cfg.test);
            let label = |x: &Vec<u32>| Example::new(x.clone(), Label::Class(lex.classify(x)));
            let train = LabeledSet::new(inputs[start..start + cfg.dataset_train].iter().map(label).collect());
            let test = LabeledSet::new(inputs[start + cfg.dataset_train..start + cfg.dataset_train + cfg.test].iter().map(label).collect());
            datasets.push((format!("task{t}"), train, test));
        }
        let pool_sources: Vec<PoolSource> = pool_inputs
            .chunks(2 * cfg.pool_cap)
            .enumerate()
            .map(|(t, c)| PoolSource {
                name: format!("task{t}"),
                texts: c.to_vec(),
            })
            .collect();
        let dedup = &inputs;
        let pool = build_pool(&pool_sources, cfg.pool_cap, dedup, mix(seed ^ 0x9001))?;
        pool.check_hygiene(dedup)?;
        let ckpt = pretrained_surrogate(&cfg.surrogate, cfg.surrogate_seed, &pool, cfg.pretrain_epochs, seed)?;

        let llms: Vec<(String, SimulatedLlm)> = (0..cfg.llms)
            .map(|j| {
                let routes = prompts
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| {
                        routed_task(cfg, i, j).map(|task| Route {
                            prompt: p.tokens.clone(),
                            task,
                            accuracy: cfg.matched_accuracy,
                        })
                    })
                    .collect();
                let llm = SimulatedLlm {
                    tasks: lexicons.clone(),
                    routes,
                    noise: cfg.noise,
                    classes: 2,
                    seed: mix(seed ^ (0x11a + j as u64)),
                };
                (format!("llm{j}"), llm)
            })
            .collect();

        for &method in &cfg.methods {
            let key = experiment_key("prompt", method, seed);
            let counters = ledger.experiment(&key);
            let k_p = cfg.llms * prompts.len();
            counters.set_dims(k_p as u64, cfg.tasks as u64);
            let store = EmbeddingStore::in_memory();
            let pipe = Pipeline::new(&ckpt, &store, &ledger)?;
            let extractor = |train: TrainConfig| ExtractorConfig {
                prefix_len: cfg.prefix_len,
                ..ExtractorConfig::new(method, TrainConfig { seed, ..train })
            };
            let cells: Vec<(usize, usize)> = (0..cfg.llms).flat_map(|j| (0..prompts.len()).map(move |i| (j, i))).collect();
            let mtes = parallel_map(jobs, &cells, |&(j, i)| {
                let (name, llm) = &llms[j];
                let base = Arc::new(ModelOracle::from_backend(name.clone(), llm.clone()));
                let oracle = as_prompted_model(base, &prompts[i], cfg.surrogate.max_len)?;
                pipe.compute_mte(&key, &oracle, &pool, &extractor(cfg.mte))
            })?;
            let dtes = parallel_map(jobs, &datasets, |(name, train, _)| pipe.compute_dte(&key, name, train, &extractor(cfg.dte)))?;
            // Ground-truth grid: accuracy of every (LLM, prompt) on every
            // dataset, which is also the NDCG relevance.
            counters.add_grid_evaluations((k_p * cfg.tasks) as u64);
            for (j, (llm_name, llm)) in llms.iter().enumerate() {
                let own: Vec<_> = mtes.iter().zip(&cells).filter(|(_, c)| c.0 == j).map(|(m, c)| (m.clone(), c.1)).collect();
                let emb_to_prompt: BTreeMap<String, String> = own.iter().map(|(m, i)| (m.id().to_owned(), prompts[*i].id.clone())).collect();
                let candidates: Vec<_> = own.into_iter().map(|(m, _)| m).collect();
                for (t, (ds_name, _, test)) in datasets.iter().enumerate() {
                    let accuracy: BTreeMap<String, f64> = prompts
                        .iter()
                        .map(|p| {
                            let hits = test
                                .examples
                                .iter()
                                .filter(|e| Label::Class(llm.answer(&p.tokens, &e.tokens)) == e.label)
                                .count();
                            (p.id.clone(), hits as f64 / test.len() as f64)
                        })
                        .collect();
                    let ranked = rank_candidates(&dtes[t], &candidates, Similarity::Cosine)?;
                    let predicted: Vec<(String, f64)> = ranked.into_iter().map(|(id, s)| (emb_to_prompt[&id].clone(), s)).collect();
                    let order: Vec<String> = predicted.iter().map(|p| p.0.clone()).collect();
                    let selected = order[0].clone();
                    let all: Vec<f64> = accuracy.values().copied().collect();
                    let random = random_baseline(&accuracy, &accuracy, cfg.random_trials, mix(seed ^ (t * 31 + j) as u64))?;
                    rows.push(PromptRow {
                        seed,
                        method,
                        llm: llm_name.clone(),
                        dataset: ds_name.clone(),
                        performance: accuracy[&selected],
                        performance_rate: performance_rate(accuracy[&selected], &all)?,
                        rank: avg_rank(&order, &accuracy)?,
                        ndcg: ndcg(&order, &accuracy)?.value,
                        random_rank: random.avg_rank,
                        random_ndcg: random.ndcg,
                        selected,
                        predicted,
                        accuracy,
                    });
                }
            }
        }
        prompts_seen = prompts;
    }
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let r: Vec<&PromptRow> = rows.iter().filter(|r| r.method == m).collect();
            let col = |f: &dyn Fn(&PromptRow) -> f64| mean(&r.iter().map(|x| f(x)).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                avg_rank: col(&|x| x.rank as f64),
                ndcg: col(&|x| x.ndcg),
                random_avg_rank: col(&|x| x.random_rank),
                random_ndcg: col(&|x| x.random_ndcg),
                data_size_avg_rank: None,
                data_size_ndcg: None,
                performance: Some(col(&|x| x.performance)),
                performance_rate: Some(col(&|x| x.performance_rate)),
            }
        })
        .collect();
    Ok(PromptReport {
        benchmark: "prompt".into(),
        prompts: prompts_seen,
        summaries,
        ledger: ledger.snapshot(),
        rows,
    })
}
