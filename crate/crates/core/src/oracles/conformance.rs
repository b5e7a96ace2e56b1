//! Protocol conformance checks for external oracle commands.
//!
//! The suite talks to the process at the byte level, so it also catches
//! framing faults that [`super::StdioBackend`] would only report as errors.

use std::time::Duration;

use serde::Serialize;

use super::protocol::{parse_reply, Reply, Request};
use super::stdio::ChildLines;
use crate::label::LabelKind;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub command: Vec<String>,
    pub kind: Option<LabelKind>,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

struct Recorder(Vec<Check>);

impl Recorder {
    fn record(&mut self, name: &str, outcome: std::result::Result<(), String>) -> bool {
        let passed = outcome.is_ok();
        self.0.push(Check {
            name: name.to_owned(),
            passed,
            detail: outcome.err().unwrap_or_default(),
        });
        passed
    }
}

fn predict_line(id: u64, prompt: Option<&[u32]>, input: &[u32]) -> String {
    Request::Predict {
        id,
        prompt: prompt.map(<[u32]>::to_vec),
        input: input.to_vec(),
    }
    .to_line()
}

/// Runs the suite against `argv`. `prompt` is sent with the prompted
/// checks when the oracle is expected to take prompts.
pub fn run_conformance(argv: &[String], probes: &[Vec<u32>], prompt: Option<&[u32]>, timeout: Duration) -> Result<ConformanceReport> {
    let mut io = ChildLines::spawn(argv)?;
    let mut rec = Recorder(Vec::new());
    let mut report = ConformanceReport {
        command: argv.to_vec(),
        kind: None,
        checks: Vec::new(),
    };

    let hello = io.send_raw(&Request::Hello.to_line()).and_then(|_| io.recv(timeout));
    let kind = match hello.as_deref().map(parse_reply) {
        Ok(Ok(Reply::Hello { kind, .. })) => Some(kind),
        _ => None,
    };
    let ok = rec.record(
        "handshake",
        kind.map(|_| ()).ok_or_else(|| format!("hello exchange failed: {hello:?}")),
    );
    report.kind = kind;
    if !ok {
        report.checks = rec.0;
        return Ok(report);
    }
    let kind = kind.expect("checked");

    let mut first_values = Vec::new();
    let mut outcome = Ok(());
    for (i, input) in probes.iter().enumerate() {
        let id = 1000 + i as u64;
        let line = io.send_raw(&predict_line(id, prompt, input)).and_then(|_| io.recv(timeout));
        let res = match line {
            Err(e) => Err(e.to_string()),
            Ok(line) => match parse_reply(&line) {
                Ok(Reply::Result { id: got, label }) if got == id && label.kind() == kind => {
                    first_values.push(label);
                    Ok(())
                }
                Ok(other) => Err(format!("probe {i}: unexpected reply {other:?} to id {id}")),
                Err(e) => Err(format!("probe {i}: {e}")),
            },
        };
        if res.is_err() {
            outcome = res;
            break;
        }
    }
    rec.record(&format!("predict ({kind})"), outcome);

    let mut outcome = Ok(());
    for (i, input) in probes.iter().enumerate() {
        let id = 5000 + i as u64;
        let line = io.send_raw(&predict_line(id, prompt, input)).and_then(|_| io.recv(timeout));
        match line.as_deref().map(parse_reply) {
            Ok(Ok(Reply::Result { label, .. })) if Some(&label) == first_values.get(i) => {}
            other => {
                outcome = Err(format!("probe {i} answered differently on repeat: {other:?}"));
                break;
            }
        }
    }
    rec.record("deterministic replies", outcome);

    for (name, garbage, want_id) in [
        ("error frame for malformed JSON", "{this is not json\n".to_owned(), None),
        (
            "error frame for unknown type",
            "{\"type\":\"frobnicate\",\"id\":77}\n".to_owned(),
            Some(77),
        ),
        (
            "error frame for invalid input",
            "{\"type\":\"predict\",\"id\":78,\"prompt\":null,\"input\":\"x\"}\n".to_owned(),
            Some(78),
        ),
    ] {
        let line = io.send_raw(&garbage).and_then(|_| io.recv(timeout));
        let res = match line.as_deref().map(parse_reply) {
            Ok(Ok(Reply::Error { id, .. })) if id == want_id => Ok(()),
            other => Err(format!("expected error frame with id {want_id:?}, got {other:?}")),
        };
        rec.record(name, res);
    }

    let res = match probes.first() {
        None => Err("no probes given".to_owned()),
        Some(input) => {
            let line = io.send_raw(&predict_line(9, prompt, input)).and_then(|_| io.recv(timeout));
            match line.as_deref().map(parse_reply) {
                Ok(Ok(Reply::Result { id: 9, .. })) => Ok(()),
                other => Err(format!("session did not continue after error frames: {other:?}")),
            }
        }
    };
    rec.record("session survives errors", res);

    let sent = io.send_raw(&Request::Bye.to_line());
    let res = match sent.and_then(|_| io.finish(timeout)) {
        Ok(Some(status)) if status.success() => Ok(()),
        Ok(Some(status)) => Err(format!("exited with {status}")),
        Ok(None) => Err("did not exit after bye".to_owned()),
        Err(e) => Err(e.to_string()),
    };
    rec.record("bye exits 0", res);

    report.checks = rec.0;
    Ok(report)
}
