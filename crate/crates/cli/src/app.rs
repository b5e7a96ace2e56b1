//! Argument parsing and one function per subcommand.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use taskvec::benchmarks::{prompt_tsv, run_dir, run_prompt_benchmark, run_transfer_benchmark, transfer_tsv, MethodSummary};
use taskvec::extractors::{Method, TaskEmbedding};
use taskvec::label::{Example, LabeledSet};
use taskvec::oracles::{as_prompted_model, HttpBackend, ModelOracle, PromptSpec, StdioBackend};
use taskvec::pipeline::{build_pool, parallel_map, rank_candidates, InvocationLedger, Pipeline, PoolSource};
use taskvec::store::{write_atomic, EmbeddingStore};
use taskvec::surrogate::{canonical_json, pretrain_masked, SurrogateCheckpoint};
use taskvec::Error;

use crate::config::{resolve, ConfigError, Overrides, RunConfig, STORE_ENV};
use crate::project::pca_project;
use crate::verify;

/// Experiment key for ledger entries recorded by single-shot commands.
const CLI_EXPERIMENT: &str = "cli";

#[derive(Parser, Debug)]
#[command(name = "taskvec", version, about = "Task and model embeddings in one surrogate space")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Embedding store root.
    #[arg(long, global = true, env = STORE_ENV)]
    pub store: Option<PathBuf>,
    /// Seed for every random choice; also narrows benchmarks to this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extractor: taskemb or tupate. Also narrows benchmarks to it.
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Maximum concurrently running jobs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Root for run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Initialize the surrogate, optionally pretrain it on a pool, and bind it to the store.
    Pretrain(PretrainArgs),
    /// Unsupervised pool management.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Dataset embedding of a labeled JSONL file.
    Dte(DteArgs),
    /// Model embedding of an external oracle over a stored pool.
    Mte(MteArgs),
    /// Rank candidate embeddings by similarity to a target.
    Rank(RankArgs),
    /// Pick the prompt whose prompted-model embedding is closest to a dataset.
    SelectPrompt(SelectPromptArgs),
    /// Synthetic benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// PCA projection of stored embeddings as TSV.
    Project(ProjectArgs),
    /// Quick invariant suite.
    Verify,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    /// Stored pool to pretrain on; without it the surrogate keeps its initialization.
    #[arg(long)]
    pub pool: Option<String>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolCommand {
    /// Sample, normalize and deduplicate texts into a stored pool.
    Build(PoolBuildArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct PoolBuildArgs {
    /// `name=path.jsonl`; each line holds a `tokens` array. Repeatable.
    #[arg(long = "source", required = true, value_parser = parse_source)]
    pub sources: Vec<(String, PathBuf)>,
    /// JSONL whose texts must not appear in the pool. Repeatable.
    #[arg(long = "dedup")]
    pub dedup: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DteArgs {
    /// Labeled JSONL: one `{"tokens":[…],"label":{…}}` per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Source name; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[group(required = true, multiple = false)]
pub struct OracleArgs {
    /// Command line of a stdio oracle, split on whitespace.
    #[arg(long)]
    pub oracle_cmd: Option<String>,
    /// URL of an HTTP oracle.
    #[arg(long)]
    pub oracle_url: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct MteArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Stored pool id.
    #[arg(long)]
    pub pool: String,
    /// One prompt (`{"id":…,"tokens":[…]}`) turning the oracle into a prompted model.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Model name; defaults to the name from the oracle's handshake.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct RankArgs {
    /// Target embedding id.
    #[arg(long)]
    pub target: String,
    /// Candidate ids; defaults to every stored embedding of the other kind in the target's space.
    #[arg(long, num_args = 1..)]
    pub candidates: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectPromptArgs {
    /// Labeled JSONL of the target dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON array of prompts.
    #[arg(long)]
    pub prompt_file: PathBuf,
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Stored pool id.
    #[arg(long)]
    pub pool: String,
    /// Dataset source name; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchCommand {
    /// Intermediate-task transfer (model selection) benchmark.
    Transfer,
    /// Prompt selection benchmark.
    Prompt,
}

#[derive(Args, Debug, Serialize)]
pub struct ProjectArgs {
    /// Embedding ids; defaults to every stored embedding of the configured method and layout.
    #[arg(long, num_args = 1..)]
    pub ids: Vec<String>,
    /// Number of principal components.
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
}

fn parse_source(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_owned(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            store: self.store.clone(),
            seed: self.seed,
            method: self.method,
            jobs: self.jobs,
            out: self.out.clone(),
        }
    }

    fn command_name(&self) -> &'static str {
        match &self.command {
            Command::Pretrain(_) => "pretrain",
            Command::Pool(PoolCommand::Build(_)) => "pool-build",
            Command::Dte(_) => "dte",
            Command::Mte(_) => "mte",
            Command::Rank(_) => "rank",
            Command::SelectPrompt(_) => "select-prompt",
            Command::Bench(BenchCommand::Transfer) => "bench-transfer",
            Command::Bench(BenchCommand::Prompt) => "bench-prompt",
            Command::Project(_) => "project",
            Command::Verify => "verify",
        }
    }
}

/// `<out>/<command>-<hash>`, keyed by the resolved config and the
/// subcommand's arguments.
struct RunDir {
    path: PathBuf,
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'a str,
    args: &'a Command,
}

impl RunDir {
    fn create(cfg: &RunConfig, name: &str, args: &Command) -> anyhow::Result<Self> {
        let invocation = Invocation { command: name, args };
        let key = serde_json::json!({ "config": cfg, "invocation": invocation });
        let path = run_dir(&cfg.out, name, &key)?;
        let dir = Self { path };
        dir.put("config.json", &json_line(cfg)?)?;
        dir.put("invocation.json", &json_line(&invocation)?)?;
        Ok(dir)
    }

    fn put(&self, name: &str, text: &str) -> anyhow::Result<()> {
        let path = self.path.join(name);
        write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
    }
}

fn json_line<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = canonical_json(value)?;
    s.push('\n');
    Ok(s)
}

/// Prints to stdout and stores the same text in the run directory.
fn emit(dir: &RunDir, name: &str, text: &str) -> anyhow::Result<()> {
    dir.put(name, text)?;
    print!("{text}");
    Ok(())
}

fn log(msg: impl std::fmt::Display) {
    eprintln!("taskvec: {msg}");
}

/// Runs the parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli.config.as_deref(), &cli.overrides())?;
    let name = cli.command_name();
    if let Command::Verify = cli.command {
        return run_verify();
    }
    let dir = RunDir::create(&cfg, name, &cli.command)?;
    log(format!("run directory {}", dir.path.display()));
    match &cli.command {
        Command::Pretrain(a) => pretrain(&cfg, a, &dir),
        Command::Pool(PoolCommand::Build(a)) => pool_build(&cfg, a, &dir),
        Command::Dte(a) => dte(&cfg, a, &dir),
        Command::Mte(a) => mte(&cfg, a, &dir),
        Command::Rank(a) => rank(&cfg, a, &dir),
        Command::SelectPrompt(a) => select_prompt(&cfg, a, &dir),
        Command::Bench(b) => bench(&cfg, b, &dir),
        Command::Project(a) => project(&cfg, a, &dir),
        Command::Verify => unreachable!("handled above"),
    }
}

fn open_store(cfg: &RunConfig) -> anyhow::Result<EmbeddingStore> {
    let root = cfg.store_root()?;
    EmbeddingStore::open(root).with_context(|| format!("opening store {}", root.display()))
}

fn load_surrogate(store: &EmbeddingStore) -> anyhow::Result<SurrogateCheckpoint> {
    if store.surrogate_fingerprint().is_none() {
        return Err(Error::Argument("store has no surrogate; run `taskvec pretrain` first".into()).into());
    }
    Ok(store.load_surrogate()?)
}

fn load_ledger(store: &EmbeddingStore) -> anyhow::Result<InvocationLedger> {
    match store.ledger_path() {
        Some(p) => Ok(InvocationLedger::load(&p)?),
        None => Ok(InvocationLedger::new()),
    }
}

fn save_ledger(store: &EmbeddingStore, ledger: &InvocationLedger) -> anyhow::Result<()> {
    if let Some(p) = store.ledger_path() {
        ledger.save(&p)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct TokensLine {
    tokens: Vec<u32>,
}

/// Parses every non-blank line of a JSONL file.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn read_dataset(path: &Path) -> anyhow::Result<LabeledSet> {
    let set = LabeledSet::new(read_jsonl::<Example>(path)?);
    if set.is_empty() {
        return Err(Error::Argument(format!("{} holds no examples", path.display())).into());
    }
    Ok(set)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn pretrain(cfg: &RunConfig, a: &PretrainArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let mut ckpt = SurrogateCheckpoint::init(cfg.surrogate, cfg.seed)?;
    if let Some(id) = &a.pool {
        let pool = store.load_pool(id)?;
        log(format!("pretraining on pool {id} ({} texts, {} epochs)", pool.len(), cfg.pretrain.epochs));
        ckpt = pretrain_masked(&ckpt, &pool.texts, &cfg.pretrain.with_seed(cfg.seed))?;
    }
    store.register_surrogate(&ckpt)?;
    let summary = serde_json::json!({
        "fingerprint": ckpt.fingerprint(),
        "param_count": cfg.surrogate.param_count(),
        "pool": a.pool,
    });
    dir.put("surrogate.json", &json_line(&summary)?)?;
    emit(dir, "stdout.txt", &format!("{}\n", ckpt.fingerprint()))
}

fn pool_build(cfg: &RunConfig, a: &PoolBuildArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let mut sources = Vec::with_capacity(a.sources.len());
    for (name, path) in &a.sources {
        let texts = read_jsonl::<TokensLine>(path)?.into_iter().map(|l| l.tokens).collect();
        sources.push(PoolSource { name: name.clone(), texts });
    }
    let mut dedup = Vec::new();
    for path in &a.dedup {
        dedup.extend(read_jsonl::<TokensLine>(path)?.into_iter().map(|l| l.tokens));
    }
    let pool = build_pool(&sources, cfg.pool.cap, &dedup, cfg.seed)?;
    store.save_pool(&pool)?;
    log(format!("pool {} holds {} texts", pool.id, pool.len()));
    emit(dir, "stdout.txt", &format!("{}\n", pool.id))
}

fn dte(cfg: &RunConfig, a: &DteArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let ckpt = load_surrogate(&store)?;
    let ledger = load_ledger(&store)?;
    let data = read_dataset(&a.data)?;
    let source = a.name.clone().unwrap_or_else(|| stem(&a.data));
    let pipeline = Pipeline::new(&ckpt, &store, &ledger)?;
    let emb = pipeline.compute_dte(CLI_EXPERIMENT, &source, &data, &cfg.dte_config())?;
    save_ledger(&store, &ledger)?;
    emit(dir, "stdout.txt", &format!("{}\n", emb.id()))
}

fn oracle_argv(cmd: &str) -> anyhow::Result<Vec<String>> {
    let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
    if argv.is_empty() {
        return Err(Error::Argument("--oracle-cmd is empty".into()).into());
    }
    Ok(argv)
}

/// Connects to the oracle named by `--oracle-cmd` or `--oracle-url`.
fn connect(cfg: &RunConfig, a: &OracleArgs, name: Option<&str>) -> anyhow::Result<ModelOracle> {
    let timeout = Duration::from_millis(cfg.oracle_timeout_ms);
    match (&a.oracle_cmd, &a.oracle_url) {
        (Some(cmd), None) => {
            let backend = StdioBackend::spawn(&oracle_argv(cmd)?, timeout)?;
            let id = name.map_or_else(|| backend.name().to_owned(), str::to_owned);
            Ok(ModelOracle::from_backend(id, backend))
        }
        (None, Some(url)) => {
            let backend = HttpBackend::connect(url, timeout)?;
            let id = name.map_or_else(|| backend.name().to_owned(), str::to_owned);
            Ok(ModelOracle::from_backend(id, backend))
        }
        _ => bail!(ConfigError("exactly one of --oracle-cmd and --oracle-url is required".into())),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
}

fn mte(cfg: &RunConfig, a: &MteArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let ckpt = load_surrogate(&store)?;
    let ledger = load_ledger(&store)?;
    let pool = store.load_pool(&a.pool)?;
    let oracle = connect(cfg, &a.oracle, a.name.as_deref())?;
    let oracle = match &a.prompt_file {
        Some(p) => {
            let spec: PromptSpec = read_json(p)?;
            as_prompted_model(Arc::new(oracle), &spec, ckpt.config.max_len)?
        }
        None => oracle,
    };
    log(format!("labeling {} pool texts with {}", pool.len(), oracle.id()));
    let pipeline = Pipeline::new(&ckpt, &store, &ledger)?;
    let emb = pipeline.compute_mte(CLI_EXPERIMENT, &oracle, &pool, &cfg.mte_config())?;
    save_ledger(&store, &ledger)?;
    emit(dir, "stdout.txt", &format!("{}\n", emb.id()))
}

fn get(store: &EmbeddingStore, id: &str) -> anyhow::Result<TaskEmbedding> {
    store
        .get(id)
        .ok_or_else(|| anyhow!(Error::Argument(format!("no embedding `{id}` in the store"))))
}

fn ranking_tsv(ranked: &[(String, f64)], label: &str) -> String {
    let mut out = format!("rank\t{label}\tsimilarity\n");
    for (i, (id, s)) in ranked.iter().enumerate() {
        let _ = writeln!(out, "{}\t{id}\t{s:.9}", i + 1);
    }
    out
}

fn rank(cfg: &RunConfig, a: &RankArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let target = get(&store, &a.target)?;
    let candidates: Vec<TaskEmbedding> = if a.candidates.is_empty() {
        store
            .ids()
            .iter()
            .filter_map(|id| store.get(id))
            .filter(|e| e.meta.kind != target.meta.kind && target.check_compatible(e).is_ok())
            .collect()
    } else {
        a.candidates.iter().map(|id| get(&store, id)).collect::<anyhow::Result<_>>()?
    };
    if candidates.is_empty() {
        return Err(Error::Argument(format!("no candidates share the space of `{}`", a.target)).into());
    }
    let ranked = rank_candidates(&target, &candidates, cfg.extractor.similarity)?;
    emit(dir, "rank.tsv", &ranking_tsv(&ranked, "id"))
}

fn select_prompt(cfg: &RunConfig, a: &SelectPromptArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let ckpt = load_surrogate(&store)?;
    let ledger = load_ledger(&store)?;
    let prompts: Vec<PromptSpec> = read_json(&a.prompt_file)?;
    if prompts.is_empty() {
        return Err(Error::Argument(format!("{} lists no prompts", a.prompt_file.display())).into());
    }
    let data = read_dataset(&a.data)?;
    let pool = store.load_pool(&a.pool)?;
    let source = a.name.clone().unwrap_or_else(|| stem(&a.data));
    let llm = Arc::new(connect(cfg, &a.oracle, None)?);
    let experiment = format!("select-prompt/{source}");
    ledger.experiment(&experiment).set_dims(prompts.len() as u64, 1);
    let pipeline = Pipeline::new(&ckpt, &store, &ledger)?;
    let target = pipeline.compute_dte(&experiment, &source, &data, &cfg.dte_config())?;
    let models = prompts
        .iter()
        .map(|p| as_prompted_model(Arc::clone(&llm), p, ckpt.config.max_len))
        .collect::<taskvec::Result<Vec<_>>>()?;
    let mtes = parallel_map(cfg.jobs, &models, |m| pipeline.compute_mte(&experiment, m, &pool, &cfg.mte_config()))?;
    save_ledger(&store, &ledger)?;
    let ranked = rank_candidates(&target, &mtes, cfg.extractor.similarity)?;
    // Map embedding ids back to prompt ids for the report.
    let by_emb: std::collections::BTreeMap<&str, &str> =
        mtes.iter().zip(&prompts).map(|(e, p)| (e.id(), p.id.as_str())).collect();
    let named: Vec<(String, f64)> = ranked.iter().map(|(id, s)| (by_emb[id.as_str()].to_owned(), *s)).collect();
    log(format!("selected prompt {}", named[0].0));
    emit(dir, "rank.tsv", &ranking_tsv(&named, "prompt"))
}

fn summary_tsv(summaries: &[MethodSummary]) -> String {
    let mut out = String::from("method\tavg_rank\tndcg\trandom_avg_rank\trandom_ndcg\n");
    for s in summaries {
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", s.method, s.avg_rank, s.ndcg, s.random_avg_rank, s.random_ndcg);
    }
    out
}

fn bench(cfg: &RunConfig, b: &BenchCommand, dir: &RunDir) -> anyhow::Result<()> {
    let outcome = match b {
        BenchCommand::Transfer => run_transfer_benchmark(&cfg.transfer, cfg.jobs)
            .and_then(|r| Ok((json_value(&r)?, transfer_tsv(&r), summary_tsv(&r.summaries)))),
        BenchCommand::Prompt => run_prompt_benchmark(&cfg.prompt, cfg.jobs)
            .and_then(|r| Ok((json_value(&r)?, prompt_tsv(&r), summary_tsv(&r.summaries)))),
    };
    match outcome {
        Ok((report, rows, summary)) => {
            dir.put("report.json", &json_line(&report)?)?;
            dir.put("rows.tsv", &rows)?;
            emit(dir, "summary.tsv", &summary)
        }
        Err(e) => {
            dir.put("partial.json", &json_line(&serde_json::json!({ "error": e.to_string() }))?)?;
            Err(e.into())
        }
    }
}

fn json_value<T: Serialize>(v: &T) -> taskvec::Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn project(cfg: &RunConfig, a: &ProjectArgs, dir: &RunDir) -> anyhow::Result<()> {
    let store = open_store(cfg)?;
    let embs: Vec<TaskEmbedding> = if a.ids.is_empty() {
        let layout = cfg.dte_config().layout();
        store
            .ids()
            .iter()
            .filter_map(|id| store.get(id))
            .filter(|e| e.meta.method == cfg.extractor.method && e.meta.layout == layout)
            .collect()
    } else {
        a.ids.iter().map(|id| get(&store, id)).collect::<anyhow::Result<_>>()?
    };
    let p = pca_project(&embs, a.dims)?;
    if p.rank_deficient() {
        log(format!("only {} of {} components exist", p.eigenvalues.len(), a.dims));
    }
    emit(dir, "project.tsv", &p.to_tsv())
}

fn run_verify() -> anyhow::Result<()> {
    let results = verify::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        bail!(VerifyFailed(failed));
    }
    Ok(())
}

/// Some `verify` checks failed. Exits with code 1.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verify check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

/// Process exit code for an error chain.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Argument(_) | Error::Format(_) | Error::Json(_)) => 2,
        Some(Error::Numeric(_) | Error::DegenerateEmbedding(_)) => 3,
        Some(Error::Transport(_) | Error::Protocol { .. }) => 4,
        Some(Error::IncompatibleSpace(_)) => 5,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(exit_code(&anyhow!(ConfigError("x".into()))), 2);
        assert_eq!(code(Error::Argument("x".into())), 2);
        assert_eq!(code(Error::Numeric("x".into())), 3);
        assert_eq!(code(Error::Transport("x".into())), 4);
        assert_eq!(code(Error::Protocol { msg: "x".into(), line: String::new() }), 4);
        assert_eq!(code(Error::IncompatibleSpace("x".into())), 5);
        assert_eq!(code(Error::Contract("x".into())), 1);
        assert_eq!(exit_code(&anyhow::Error::from(Error::Transport("x".into())).context("while labeling")), 4);
    }

    #[test]
    fn source_flag_parses_name_and_path() {
        assert_eq!(parse_source("web=a/b.jsonl").unwrap(), ("web".into(), PathBuf::from("a/b.jsonl")));
        assert!(parse_source("nopath").is_err());
        assert!(parse_source("=x").is_err());
    }

    #[test]
    fn oracle_flags_are_exclusive_and_required() {
        let base = ["taskvec", "mte", "--pool", "p"];
        assert!(Cli::try_parse_from(base).is_err());
        assert!(Cli::try_parse_from([&base[..], &["--oracle-cmd", "a", "--oracle-url", "b"]].concat()).is_err());
        assert!(Cli::try_parse_from([&base[..], &["--oracle-url", "http://x"]].concat()).is_ok());
    }

    #[test]
    fn help_lists_every_global_flag() {
        let help = Cli::command().render_long_help().to_string();
        for flag in ["--config", "--store", "--seed", "--method", "--jobs", "--out"] {
            assert!(help.contains(flag), "{flag} missing from help");
        }
        let mut cmd = Cli::command();
        let mte = cmd.find_subcommand_mut("mte").unwrap().render_long_help().to_string();
        for flag in ["--oracle-cmd", "--oracle-url", "--prompt-file", "--pool"] {
            assert!(mte.contains(flag), "{flag} missing from mte help");
        }
    }

    #[test]
    fn run_dir_depends_on_args_and_config() {
        let out = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: out.path().to_owned(),
            ..RunConfig::default()
        };
        let a = Command::Rank(RankArgs { target: "t".into(), candidates: vec![] });
        let b = Command::Rank(RankArgs { target: "u".into(), candidates: vec![] });
        let da = RunDir::create(&cfg, "rank", &a).unwrap();
        assert_eq!(RunDir::create(&cfg, "rank", &a).unwrap().path, da.path);
        assert_ne!(RunDir::create(&cfg, "rank", &b).unwrap().path, da.path);
        let other = RunConfig { seed: 1, ..cfg.clone() };
        assert_ne!(RunDir::create(&other, "rank", &a).unwrap().path, da.path);
        let saved: RunConfig = serde_json::from_str(&std::fs::read_to_string(da.path.join("config.json")).unwrap()).unwrap();
        assert_eq!(saved, cfg);
    }
}
