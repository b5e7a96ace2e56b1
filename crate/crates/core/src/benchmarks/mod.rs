//! Synthetic benchmarks for model selection and prompt selection, with
//! measured ground truth and ranking metrics.

pub mod families;
pub mod metrics;
mod prompt;
mod transfer;
pub mod zoo;

pub use families::{gen_family, FamilyId, TaskFamily};
pub use metrics::{avg_rank, ndcg, performance_rate, random_baseline, relevance, Ndcg, RandomBaseline, RelevanceMapping};
pub use prompt::{correlated_lexicons, run_prompt_benchmark, PromptBenchConfig, PromptReport, PromptRow};
pub use transfer::{
    gain_table, measure_transfer_gain, run_clustering_probe, run_transfer_benchmark, score, ProbeConfig, ProbeResult,
    TransferBenchConfig, TransferConfig, TransferGainTable, TransferReport, TransferRow, ZooEntry,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::extractors::Method;
use crate::pipeline::UnsupervisedPool;
use crate::store::write_atomic;
use crate::surrogate::{canonical_json, pretrain_masked, SurrogateCheckpoint, SurrogateConfig, TrainConfig};
use crate::Result;

/// Seed-averaged results of one extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub avg_rank: f64,
    pub ndcg: f64,
    pub random_avg_rank: f64,
    pub random_ndcg: f64,
    pub data_size_avg_rank: Option<f64>,
    pub data_size_ndcg: Option<f64>,
    pub performance: Option<f64>,
    pub performance_rate: Option<f64>,
}

pub(crate) fn experiment_key(bench: &str, method: Method, seed: u64) -> String {
    format!("{bench}/{method}/seed-{seed}")
}

/// The shared surrogate of one experiment: seeded init, then masked-LM
/// pretraining on the pool.
pub(crate) fn pretrained_surrogate(config: &SurrogateConfig, init_seed: u64, pool: &UnsupervisedPool, epochs: usize, seed: u64) -> Result<SurrogateCheckpoint> {
    let ckpt = SurrogateCheckpoint::init(*config, init_seed)?;
    if epochs == 0 {
        return Ok(ckpt);
    }
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    pretrain_masked(&ckpt, &pool.texts, &cfg)
}

/// `<root>/<bench>-<first 16 hex of sha256(canonical config)>`.
pub fn run_dir<C: Serialize>(root: &Path, bench: &str, config: &C) -> Result<PathBuf> {
    let hash = hex::encode(Sha256::digest(canonical_json(config)?.as_bytes()));
    Ok(root.join(format!("{bench}-{}", &hash[..16])))
}

fn json_file<T: Serialize>(value: &T) -> Result<String> {
    let mut s = canonical_json(value)?;
    s.push('\n');
    Ok(s)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Per-target rows of a transfer report as TSV.
pub fn transfer_tsv(report: &TransferReport) -> String {
    let mut out = String::from("seed\tmethod\ttarget\ttop_candidate\trank\tndcg\trandom_rank\trandom_ndcg\tdata_size_rank\tdata_size_ndcg\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.seed,
            r.method,
            r.target,
            r.predicted.first().map(|p| p.0.as_str()).unwrap_or(""),
            r.rank,
            fmt_f(r.ndcg),
            fmt_f(r.random_rank),
            fmt_f(r.random_ndcg),
            r.data_size_rank,
            fmt_f(r.data_size_ndcg)
        );
    }
    out
}

/// Per-target rows of a prompt report as TSV.
pub fn prompt_tsv(report: &PromptReport) -> String {
    let mut out = String::from("seed\tmethod\tllm\tdataset\tselected\tperformance\tperformance_rate\trank\tndcg\trandom_rank\trandom_ndcg\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.seed,
            r.method,
            r.llm,
            r.dataset,
            r.selected,
            fmt_f(r.performance),
            fmt_f(r.performance_rate),
            r.rank,
            fmt_f(r.ndcg),
            fmt_f(r.random_rank),
            fmt_f(r.random_ndcg)
        );
    }
    out
}

/// Writes `config.json`, `report.json` and `rows.tsv` under the run
/// directory derived from `config` and returns that directory.
pub fn write_report<C: Serialize, R: Serialize>(root: &Path, bench: &str, config: &C, report: &R, tsv: &str) -> Result<PathBuf> {
    let dir = run_dir(root, bench, config)?;
    write_atomic(&dir.join("config.json"), json_file(config)?.as_bytes())?;
    write_atomic(&dir.join("report.json"), json_file(report)?.as_bytes())?;
    write_atomic(&dir.join("rows.tsv"), tsv.as_bytes())?;
    Ok(dir)
}

/// Records a failed run for debugging: the error plus whatever the caller
/// had finished.
pub fn write_partial<C: Serialize>(root: &Path, bench: &str, config: &C, error: &str) -> Result<PathBuf> {
    let dir = run_dir(root, bench, config)?;
    let body = serde_json::json!({ "error": error, "config": serde_json::to_value(config)? });
    write_atomic(&dir.join("partial.json"), json_file(&body)?.as_bytes())?;
    Ok(dir)
}
