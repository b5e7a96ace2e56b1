use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::protocol::{handle_line, parse_reply, reply_line, Reply, Request};
use super::stdio::check_result;
use super::Backend;
use crate::label::{Label, LabelKind};
use crate::{Error, Result};

/// An oracle reachable over HTTP: every protocol message is one POST whose
/// body is the request line and whose response body is the reply line.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    kind: LabelKind,
    name: String,
    next_id: AtomicU64,
}

impl HttpBackend {
    /// Performs the handshake against `url`.
    pub fn connect(url: &str, timeout: Duration) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let line = post(&agent, url, &Request::Hello)?;
        match parse_reply(&line)? {
            Reply::Hello { kind, name } => Ok(Self {
                agent,
                url: url.to_owned(),
                kind,
                name,
                next_id: AtomicU64::new(0),
            }),
            _ => Err(Error::Protocol {
                msg: "expected a hello reply".into(),
                line,
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

fn post(agent: &ureq::Agent, url: &str, req: &Request) -> Result<String> {
    let mut resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(req.to_line())
        .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
    Ok(body.trim_end_matches('\n').to_owned())
}

impl Drop for HttpBackend {
    fn drop(&mut self) {
        let _ = post(&self.agent, &self.url, &Request::Bye);
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> LabelKind {
        self.kind
    }

    fn accepts_prompt(&self) -> bool {
        true
    }

    fn predict(&self, prompt: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let req = Request::Predict {
            id,
            prompt: prompt.map(<[u32]>::to_vec),
            input: input.to_vec(),
        };
        let line = post(&self.agent, &self.url, &req)?;
        check_result(parse_reply(&line)?, id, self.kind, &line)
    }
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

/// Reads one HTTP request and returns its body.
fn read_body(stream: &TcpStream) -> std::io::Result<String> {
    let mut reader = BufReader::new(stream);
    let mut length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    Ok(String::from_utf8_lossy(&body).into_owned())
}

/// Serves the protocol over HTTP on `listener`, one connection at a time,
/// until a `bye` request arrives.
pub fn serve_http(listener: TcpListener, backend: &dyn Backend, name: &str) -> Result<()> {
    for stream in listener.incoming() {
        let mut stream = stream?;
        let body = match read_body(&stream) {
            Ok(b) => b,
            Err(_) => continue,
        };
        match handle_line(body.trim_end(), backend, name) {
            None => {
                respond(&mut stream, "200 OK", "")?;
                return Ok(());
            }
            Some(reply) => respond(&mut stream, "200 OK", &reply_line(&reply))?,
        }
    }
    Ok(())
}
