//! End-to-end runs of the `taskvec` binary against a store in a temp dir and
//! an HTTP oracle served in-process.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskvec::label::{Label, LabelKind};
use taskvec::oracles::{serve_http, Backend, MajorityTokenModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_taskvec"));
    c.env_remove("TASKVEC_STORE");
    c
}

/// Majority vote over prompt and input together.
struct PromptedMajority;

impl Backend for PromptedMajority {
    fn kind(&self) -> LabelKind {
        LabelKind::Class
    }

    fn accepts_prompt(&self) -> bool {
        true
    }

    fn predict(&self, prompt: Option<&[u32]>, input: &[u32]) -> taskvec::Result<Label> {
        let all: Vec<u32> = prompt.unwrap_or_default().iter().chain(input).copied().collect();
        Ok(Label::Class(MajorityTokenModel::classify(2, &all)))
    }
}

/// Serves one oracle session; the backend sends `bye` when the CLI exits.
fn oracle_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || serve_http(listener, &PromptedMajority, "majority"));
    url
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        env.write(
            "cfg.json",
            r#"{
  "surrogate": {"vocab": 16, "width": 8, "layers": 1, "heads": 2, "ff_width": 8, "max_len": 12, "classes": 2, "seq_len": 2},
  "pretrain": {"epochs": 1},
  "pool": {"cap": 40},
  "extractor": {"dte": {"epochs": 1, "batch_size": 8}, "mte": {"epochs": 1, "batch_size": 8}}
}"#,
        );
        let texts: String = (0..60u32)
            .map(|i| format!("{{\"tokens\":[{},{},{}]}}\n", 3 + i % 13, 3 + (i / 13) % 13, 3 + (i * 7) % 13))
            .collect();
        env.write("web.jsonl", &texts);
        let data: String = (0..24u32)
            .map(|i| format!("{{\"tokens\":[{},{}],\"label\":{{\"kind\":\"class\",\"value\":{}}}}}\n", 3 + i % 2, 5 + i % 7, i % 2))
            .collect();
        env.write("task.jsonl", &data);
        env.write("prompt.json", r#"{"id": "p0", "tokens": [3, 3]}"#);
        env.write("prompts.json", r#"[{"id": "p0", "tokens": [3, 3]}, {"id": "p1", "tokens": [4, 4]}]"#);
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        bin()
            .arg("--config")
            .arg(self.path("cfg.json"))
            .arg("--store")
            .arg(self.path("store"))
            .arg("--out")
            .arg(self.path("runs"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    /// Runs and returns trimmed stdout, failing on a non-zero exit.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().to_owned()
    }

    fn setup(&self) -> (String, String) {
        let pool = self.ok(&["pool", "build", "--source", "web=web.jsonl", "--dedup", "task.jsonl"]);
        let fingerprint = self.ok(&["pretrain", "--pool", &pool]);
        (pool, fingerprint)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn run_dirs(root: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_end_to_end() {
    let env = Env::new();
    let (pool, fingerprint) = env.setup();
    assert_eq!(fingerprint.len(), 64);

    let dte = env.ok(&["dte", "--data", "task.jsonl"]);
    assert!(dte.starts_with("dte-taskemb-task-"), "{dte}");
    let f32_path = env.path("store/emb").join(format!("{dte}.f32"));
    let first = std::fs::read(&f32_path).unwrap();
    assert_eq!(env.ok(&["dte", "--data", "task.jsonl"]), dte);
    assert_eq!(std::fs::read(&f32_path).unwrap(), first);

    let mte = env.ok(&["mte", "--oracle-url", &oracle_url(), "--pool", &pool]);
    assert!(mte.starts_with("mte-taskemb-majority-"), "{mte}");
    let prompted = env.ok(&["mte", "--oracle-url", &oracle_url(), "--pool", &pool, "--prompt-file", "prompt.json"]);
    assert!(prompted.starts_with("mte-taskemb-majority#p0-"), "{prompted}");

    let ranked = env.ok(&["rank", "--target", &dte]);
    let lines: Vec<&str> = ranked.lines().collect();
    assert_eq!(lines[0], "rank\tid\tsimilarity");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.contains("\tmte-")));

    let projected = env.ok(&["project"]);
    let rows: Vec<&str> = projected.lines().collect();
    assert_eq!(rows[0], "id\tkind\tmethod\tsource\tpc1\tpc2");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with(&dte));

    // Every run directory holds the resolved config and the invocation.
    let runs = env.path("runs");
    let rank_dir = &run_dirs(&runs, "rank-")[0];
    assert!(rank_dir.join("config.json").exists());
    assert!(std::fs::read_to_string(rank_dir.join("invocation.json")).unwrap().contains(&dte));
    assert_eq!(std::fs::read_to_string(rank_dir.join("rank.tsv")).unwrap().trim(), ranked);
    assert_eq!(run_dirs(&runs, "dte-").len(), 1, "identical invocations share a run directory");
}

#[test]
fn select_prompt_ranks_every_prompt_and_records_the_ledger() {
    let env = Env::new();
    let (pool, _) = env.setup();
    let out = env.ok(&["select-prompt", "--data", "task.jsonl", "--prompt-file", "prompts.json", "--oracle-url", &oracle_url(), "--pool", &pool]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "rank\tprompt\tsimilarity");
    let mut chosen: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').nth(1).unwrap()).collect();
    chosen.sort();
    assert_eq!(chosen, ["p0", "p1"]);
    let ledger: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(env.path("store/ledger.json")).unwrap()).unwrap();
    let entry = &ledger["select-prompt/task"];
    assert_eq!((entry["k_p"].as_u64(), entry["k_d"].as_u64()), (Some(2), Some(1)));
    assert_eq!(entry["extractor_calls"].as_u64(), Some(3));
}

#[test]
fn exit_codes_classify_failures() {
    let env = Env::new();
    env.write("bad.json", r#"{"seeed": 1}"#);
    let bad = bin().args(["--config"]).arg(env.path("bad.json")).args(["--store", "s", "project"]).output().unwrap();
    assert_eq!(code(&bad), 2, "unknown config key");
    let no_store = bin().args(["--config"]).arg(env.path("cfg.json")).args(["--out"]).arg(env.path("runs")).arg("project").output().unwrap();
    assert_eq!(code(&no_store), 2, "missing store");

    let (pool, _) = env.setup();
    assert_eq!(code(&env.run(&["--seed", "9", "pretrain"])), 5, "store bound to another surrogate");
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    assert_eq!(code(&env.run(&["mte", "--oracle-url", &dead, "--pool", &pool])), 4, "unreachable oracle");
    assert_eq!(code(&env.run(&["mte", "--oracle-cmd", "/nonexistent/oracle", "--pool", &pool])), 4, "unspawnable oracle");
    assert_eq!(code(&env.run(&["rank", "--target", "nope"])), 2, "unknown embedding");
    assert_eq!(code(&env.run(&["dte", "--data", "web.jsonl"])), 2, "unlabeled data");

    let dte = env.ok(&["dte", "--data", "task.jsonl"]);
    let tupate = env.ok(&["--method", "tupate", "dte", "--data", "task.jsonl"]);
    assert_eq!(code(&env.run(&["rank", "--target", &dte, "--candidates", &tupate])), 5, "mixed methods");
    assert_eq!(code(&env.run(&["project", "--ids", &dte, &tupate])), 5, "mixed methods");
}

#[test]
fn store_may_come_from_the_environment() {
    let env = Env::new();
    let out = bin()
        .env("TASKVEC_STORE", env.path("store"))
        .arg("--config")
        .arg(env.path("cfg.json"))
        .arg("--out")
        .arg(env.path("runs"))
        .args(["pool", "build", "--source", "web=web.jsonl"])
        .current_dir(env.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let id = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    assert!(env.path("store/pool").join(format!("{id}.jsonl")).exists());
}

#[test]
fn verify_passes() {
    let out = bin().arg("verify").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 5, "{text}");
}

#[test]
fn bench_prompt_writes_report_rows_and_summary() {
    let env = Env::new();
    env.write(
        "bench.json",
        r#"{
  "prompt": {
    "surrogate": {"vocab": 64, "width": 8, "layers": 1, "heads": 2, "ff_width": 8, "max_len": 16, "classes": 2, "seq_len": 2},
    "pretrain_epochs": 0, "dataset_train": 24, "test": 40, "pool_cap": 20, "random_trials": 20,
    "dte": {"epochs": 1}, "mte": {"epochs": 1}
  }
}"#,
    );
    let out = bin()
        .arg("--config")
        .arg(env.path("bench.json"))
        .args(["--seed", "3", "--method", "taskemb", "--out"])
        .arg(env.path("runs"))
        .args(["bench", "prompt"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.starts_with("method\tavg_rank\tndcg"), "{summary}");
    assert_eq!(summary.lines().count(), 2, "flags narrow the run to one method: {summary}");
    let dir = &run_dirs(&env.path("runs"), "bench-prompt-")[0];
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["ledger"].as_object().unwrap().keys().all(|k| k.ends_with("seed-3")));
    let rows = std::fs::read_to_string(dir.join("rows.tsv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.starts_with("3\ttaskemb\t")), "{rows}");
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["prompt"]["seeds"], serde_json::json!([3]));
}
