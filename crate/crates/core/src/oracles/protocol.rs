//! The oracle wire protocol: UTF-8 JSON, one object per LF-terminated line.
//!
//! ```text
//! → {"type":"hello"}
//! ← {"type":"hello","kind":"class","name":"lexicon"}
//! → {"type":"predict","id":0,"prompt":null,"input":[5,9,3]}
//! ← {"type":"result","id":0,"kind":"class","value":1}
//! → {"type":"bye"}
//! ```
//!
//! A request the server cannot handle gets
//! `{"type":"error","id":<id or null>,"msg":"..."}` and the session continues.

use std::io::{BufRead, Write};

use serde::Serialize;
use serde_json::{json, Value};

use super::Backend;
use crate::label::{Label, LabelKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Predict {
        id: u64,
        prompt: Option<Vec<u32>>,
        input: Vec<u32>,
    },
    Bye,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Hello { kind: LabelKind, name: String },
    Result { id: u64, label: Label },
    Error { id: Option<u64>, msg: String },
}

impl Request {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("request serializes");
        s.push('\n');
        s
    }
}

/// Wire value of an output: uint, float array, float or uint array.
pub fn label_value(label: &Label) -> Value {
    match label {
        Label::Class(c) => json!(c),
        Label::Distribution(p) => json!(p),
        Label::Scalar(y) => json!(y),
        Label::Tokens(t) => json!(t),
    }
}

fn as_uint(v: &Value) -> Option<u64> {
    v.as_u64()
}

fn as_u32_array(v: &Value) -> Option<Vec<u32>> {
    v.as_array()?
        .iter()
        .map(|x| as_uint(x).and_then(|n| u32::try_from(n).ok()))
        .collect()
}

/// Parses a wire value of the declared kind.
pub fn parse_value(kind: LabelKind, v: &Value) -> std::result::Result<Label, String> {
    let parsed = match kind {
        LabelKind::Class => as_uint(v).and_then(|c| usize::try_from(c).ok()).map(Label::Class),
        LabelKind::Distribution => v
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .map(Label::Distribution),
        LabelKind::Scalar => v.as_f64().map(Label::Scalar),
        LabelKind::Tokens => as_u32_array(v).map(Label::Tokens),
    };
    parsed.ok_or_else(|| format!("value {v} is not a valid {kind} output"))
}

fn protocol(msg: impl Into<String>, line: &str) -> Error {
    Error::Protocol {
        msg: msg.into(),
        line: line.trim_end().to_owned(),
    }
}

/// Client side: parses one reply line.
pub fn parse_reply(line: &str) -> Result<Reply> {
    let v: Value = serde_json::from_str(line).map_err(|e| protocol(format!("reply is not JSON: {e}"), line))?;
    let obj = v.as_object().ok_or_else(|| protocol("reply is not a JSON object", line))?;
    let field = |k: &str| obj.get(k).ok_or_else(|| protocol(format!("reply lacks `{k}`"), line));
    let kind = |v: &Value| -> Result<LabelKind> {
        v.as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| protocol(format!("unknown output kind {v}"), line))
    };
    match field("type")?.as_str() {
        Some("hello") => Ok(Reply::Hello {
            kind: kind(field("kind")?)?,
            name: field("name")?
                .as_str()
                .ok_or_else(|| protocol("`name` must be a string", line))?
                .to_owned(),
        }),
        Some("result") => {
            let id = as_uint(field("id")?).ok_or_else(|| protocol("`id` must be an unsigned integer", line))?;
            let k = kind(field("kind")?)?;
            let label = parse_value(k, field("value")?).map_err(|m| protocol(m, line))?;
            Ok(Reply::Result { id, label })
        }
        Some("error") => Ok(Reply::Error {
            id: obj.get("id").and_then(as_uint),
            msg: obj.get("msg").and_then(Value::as_str).unwrap_or("").to_owned(),
        }),
        _ => Err(protocol("unknown reply type", line)),
    }
}

/// Server side: parses one request line. On failure returns the request id
/// (when recoverable) and a message for the error frame.
pub fn parse_request(line: &str) -> std::result::Result<Request, (Option<u64>, String)> {
    let v: Value = serde_json::from_str(line).map_err(|e| (None, format!("request is not JSON: {e}")))?;
    let obj = v.as_object().ok_or((None, "request is not a JSON object".to_owned()))?;
    let id = obj.get("id").and_then(as_uint);
    match obj.get("type").and_then(Value::as_str) {
        Some("hello") => Ok(Request::Hello),
        Some("bye") => Ok(Request::Bye),
        Some("predict") => {
            let id = id.ok_or((None, "predict needs an unsigned integer `id`".to_owned()))?;
            let prompt = match obj.get("prompt") {
                None | Some(Value::Null) => None,
                Some(p) => Some(as_u32_array(p).ok_or((Some(id), "`prompt` must be null or an array of token ids".to_owned()))?),
            };
            let input = obj
                .get("input")
                .and_then(as_u32_array)
                .ok_or((Some(id), "`input` must be an array of token ids".to_owned()))?;
            Ok(Request::Predict { id, prompt, input })
        }
        _ => Err((id, "unknown request type".to_owned())),
    }
}

/// Serializes a reply with keys in protocol order.
pub fn reply_line(reply: &Reply) -> String {
    let mut s = match reply {
        Reply::Hello { kind, name } => format!(
            r#"{{"type":"hello","kind":{},"name":{}}}"#,
            json!(kind.as_str()),
            json!(name)
        ),
        Reply::Result { id, label } => format!(
            r#"{{"type":"result","id":{id},"kind":{},"value":{}}}"#,
            json!(label.kind().as_str()),
            label_value(label)
        ),
        Reply::Error { id, msg } => format!(r#"{{"type":"error","id":{},"msg":{}}}"#, json!(id), json!(msg)),
    };
    s.push('\n');
    s
}

/// Handles one request line. `None` means the session should end.
pub fn handle_line(line: &str, backend: &dyn Backend, name: &str) -> Option<Reply> {
    match parse_request(line) {
        Ok(Request::Bye) => None,
        Ok(Request::Hello) => Some(Reply::Hello {
            kind: backend.kind(),
            name: name.to_owned(),
        }),
        Ok(Request::Predict { id, prompt, input }) => {
            let prompt = prompt.filter(|p| !p.is_empty());
            if prompt.is_some() && !backend.accepts_prompt() {
                return Some(Reply::Error {
                    id: Some(id),
                    msg: "this model does not take prompts".into(),
                });
            }
            if input.is_empty() {
                return Some(Reply::Error {
                    id: Some(id),
                    msg: "empty input".into(),
                });
            }
            Some(match backend.predict(prompt.as_deref(), &input) {
                Ok(label) => Reply::Result { id, label },
                Err(e) => Reply::Error {
                    id: Some(id),
                    msg: e.to_string(),
                },
            })
        }
        Err((id, msg)) => Some(Reply::Error { id, msg }),
    }
}

/// Serves the protocol until `bye` or end of input. Flushes after every
/// reply; writes nothing else to `writer`.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, backend: &dyn Backend, name: &str) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match handle_line(&line, backend, name) {
            None => break,
            Some(reply) => {
                writer.write_all(reply_line(&reply).as_bytes())?;
                writer.flush()?;
            }
        }
    }
    Ok(())
}
