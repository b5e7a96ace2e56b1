use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use taskvec::extractors::{ExtractorConfig, Method};
use taskvec::label::{Label, LabelKind};
use taskvec::oracles::conformance::run_conformance;
use taskvec::oracles::profile::OracleProfile;
use taskvec::oracles::{serve_http, Backend, EchoModel, HttpBackend, ModelOracle, StdioBackend};
use taskvec::pipeline::{build_pool, InvocationLedger, Pipeline, PoolSource};
use taskvec::store::EmbeddingStore;
use taskvec::surrogate::{SurrogateCheckpoint, SurrogateConfig, TrainConfig};
use taskvec::Error;
use taskvec_autodiff::Rng;

const ORACLE: &str = env!("CARGO_BIN_EXE_taskvec-oracle");
const TIMEOUT: Duration = Duration::from_secs(10);

fn write_profile(dir: &Path, name: &str, behavior: &str) -> String {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, format!(r#"{{"name":"{name}","behavior":{behavior}}}"#)).unwrap();
    path.to_string_lossy().into_owned()
}

fn oracle_argv(profile: &str) -> Vec<String> {
    vec![ORACLE.to_owned(), profile.to_owned()]
}

fn sh(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

fn random_inputs(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(8);
            (0..len).map(|_| 3 + rng.below(13) as u32).collect()
        })
        .collect()
}

const PROFILES: [(&str, &str, LabelKind); 4] = [
    ("majority", r#"{"type":"majority","classes":4}"#, LabelKind::Class),
    ("soft", r#"{"type":"soft_majority","classes":4}"#, LabelKind::Distribution),
    ("const", r#"{"type":"constant","output":{"kind":"scalar","value":-0.25}}"#, LabelKind::Scalar),
    ("echo", r#"{"type":"echo","seq_len":4}"#, LabelKind::Tokens),
];

#[test]
fn reference_oracle_conforms_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    for (name, behavior, kind) in PROFILES {
        let argv = oracle_argv(&write_profile(dir.path(), name, behavior));
        let report = run_conformance(&argv, &random_inputs(10, 1), None, TIMEOUT).unwrap();
        assert_eq!(report.kind, Some(kind));
        assert!(report.passed(), "{name}: {:#?}", report.checks);
        assert_eq!(report.checks.len(), 8);
    }
}

#[test]
fn prompted_oracle_conforms() {
    let dir = tempfile::tempdir().unwrap();
    let behavior = r#"{"type":"prompt_routed","tasks":[{"weights":[0,0,0,1,-1]}],
        "routes":[{"prompt":[9,9],"task":0,"accuracy":0.9}],"noise":0.05,"classes":2,"seed":4}"#;
    let argv = oracle_argv(&write_profile(dir.path(), "llm", behavior));
    let report = run_conformance(&argv, &random_inputs(10, 2), Some(&[9, 9]), TIMEOUT).unwrap();
    assert!(report.passed(), "{:#?}", report.checks);
}

#[test]
fn conformance_flags_a_broken_server() {
    let argv = sh(r#"read l; echo '{"type":"hello","kind":"class","name":"x"}'; while read l; do echo '{"type":"result","id":0,"kind":"class","value":0}'; done"#);
    let report = run_conformance(&argv, &random_inputs(3, 3), None, TIMEOUT).unwrap();
    assert!(!report.passed());
    assert!(report.checks[0].passed);
    assert!(!report.checks[1].passed);
}

#[test]
fn stdio_session_matches_in_process_model() {
    let dir = tempfile::tempdir().unwrap();
    for (name, behavior, _) in PROFILES {
        let path = write_profile(dir.path(), name, behavior);
        let local = OracleProfile::load(Path::new(&path)).unwrap().backend();
        let remote = StdioBackend::spawn(&oracle_argv(&path), TIMEOUT).unwrap();
        assert_eq!(remote.name(), name);
        assert_eq!(remote.kind(), local.kind());
        for input in random_inputs(100, 4) {
            assert_eq!(remote.predict(None, &input).unwrap(), local.predict(None, &input).unwrap());
        }
        assert!(remote.shutdown().unwrap().success());
    }
}

#[test]
fn http_session_matches_in_process_model() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let server = std::thread::spawn(move || serve_http(listener, &EchoModel::new(4), "echo-http"));
    {
        let remote = HttpBackend::connect(&url, TIMEOUT).unwrap();
        assert_eq!((remote.name(), remote.kind()), ("echo-http", LabelKind::Tokens));
        for input in random_inputs(100, 5) {
            assert_eq!(remote.predict(None, &input).unwrap(), EchoModel::new(4).predict(None, &input).unwrap());
        }
    }
    server.join().unwrap().unwrap();
}

#[test]
fn echo_mte_identical_across_backends() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_profile(dir.path(), "echo", r#"{"type":"echo","seq_len":4}"#);
    let config = SurrogateConfig {
        vocab: 16,
        width: 8,
        layers: 1,
        heads: 2,
        ff_width: 8,
        max_len: 8,
        classes: 2,
        seq_len: 4,
    };
    let ckpt = SurrogateCheckpoint::init(config, 7).unwrap();
    let pool = build_pool(
        &[PoolSource {
            name: "random".into(),
            texts: random_inputs(24, 6),
        }],
        24,
        &[],
        0,
    )
    .unwrap();
    for method in Method::ALL {
        let cfg = ExtractorConfig::new(
            method,
            TrainConfig {
                epochs: 1,
                batch_size: 8,
                lr: 1e-2,
                seed: 11,
            },
        );
        let mut values = Vec::new();
        let backends: [Arc<dyn Backend>; 2] = [
            Arc::new(EchoModel::new(4)),
            Arc::new(StdioBackend::spawn(&oracle_argv(&path), TIMEOUT).unwrap()),
        ];
        for backend in backends {
            let store = EmbeddingStore::in_memory();
            let ledger = InvocationLedger::new();
            let p = Pipeline::new(&ckpt, &store, &ledger).unwrap();
            let oracle = ModelOracle::new("echo", backend);
            values.push(p.compute_mte("x", &oracle, &pool, &cfg).unwrap().values);
        }
        assert_eq!(values[0], values[1], "{method}");
    }
}

#[test]
fn silent_server_times_out() {
    let argv = sh(r#"read l; echo '{"type":"hello","kind":"class","name":"slow"}'; read l; sleep 5"#);
    let backend = StdioBackend::spawn(&argv, Duration::from_millis(300)).unwrap();
    assert!(matches!(backend.predict(None, &[3]), Err(Error::Transport(_))));
    // The session stays broken; no retry reaches the process.
    assert!(matches!(backend.predict(None, &[3]), Err(Error::Transport(m)) if m.contains("unusable")));
}

#[test]
fn dead_process_is_a_transport_error() {
    assert!(matches!(StdioBackend::spawn(&sh("exit 0"), TIMEOUT), Err(Error::Transport(_))));
    let argv = sh(r#"read l; echo '{"type":"hello","kind":"class","name":"x"}'; exit 0"#);
    let backend = StdioBackend::spawn(&argv, TIMEOUT).unwrap();
    assert!(matches!(backend.predict(None, &[3]), Err(Error::Transport(_))));
    let missing = vec!["/nonexistent/oracle-binary".to_owned()];
    assert!(matches!(StdioBackend::spawn(&missing, TIMEOUT), Err(Error::Transport(_))));
}

#[test]
fn malformed_reply_cites_the_line() {
    let argv = sh(r#"read l; echo '{"type":"hello","kind":"class","name":"x"}'; read l; echo 'not json at all'; read l"#);
    let backend = StdioBackend::spawn(&argv, TIMEOUT).unwrap();
    match backend.predict(None, &[3]) {
        Err(Error::Protocol { line, .. }) => assert_eq!(line, "not json at all"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn kind_drift_and_id_mismatch_are_protocol_errors() {
    let argv = sh(r#"read l; echo '{"type":"hello","kind":"class","name":"x"}'; read l; echo '{"type":"result","id":0,"kind":"scalar","value":1.5}'; read l; echo '{"type":"result","id":7,"kind":"class","value":1}'; read l"#);
    let backend = StdioBackend::spawn(&argv, TIMEOUT).unwrap();
    assert!(matches!(backend.predict(None, &[3]), Err(Error::Protocol { .. })));
    assert!(matches!(backend.predict(None, &[3]), Err(Error::Protocol { msg, .. }) if msg.contains("id 7")));
}

#[test]
fn remote_error_frame_surfaces() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_profile(dir.path(), "majority", PROFILES[0].1);
    let backend = StdioBackend::spawn(&oracle_argv(&path), TIMEOUT).unwrap();
    // A prompt sent to a prompt-free profile is rejected by the server.
    assert!(matches!(backend.predict(Some(&[4]), &[3]), Err(Error::Protocol { .. })));
    assert_eq!(backend.predict(None, &[3, 3]).unwrap(), Label::Class(0));
}
