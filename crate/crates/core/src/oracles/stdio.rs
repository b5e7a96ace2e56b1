use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::protocol::{parse_reply, Reply, Request};
use super::Backend;
use crate::label::{Label, LabelKind};
use crate::{Error, Result};

/// A child process plus a reader thread delivering its stdout line by line.
pub(crate) struct ChildLines {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
}

impl ChildLines {
    pub(crate) fn spawn(argv: &[String]) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::Argument("empty oracle command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start `{prog}`: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    pub(crate) fn send_raw(&mut self, text: &str) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("oracle input already closed".into()))?;
        stdin
            .write_all(text.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Transport(format!("writing to oracle: {e}")))
    }

    /// Next complete line, without its terminator.
    pub(crate) fn recv(&mut self, timeout: Duration) -> Result<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => {
                if !line.ends_with('\n') {
                    return Err(Error::Protocol {
                        msg: "reply not terminated by LF before end of stream".into(),
                        line,
                    });
                }
                Ok(line.trim_end_matches('\n').to_owned())
            }
            Ok(Err(e)) => Err(Error::Transport(format!("reading from oracle: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport(format!(
                "oracle did not answer within {:.1}s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("oracle closed its output".into())),
        }
    }

    /// Closes stdin and waits up to `timeout` for exit, then kills.
    pub(crate) fn finish(&mut self, timeout: Duration) -> Result<Option<ExitStatus>> {
        self.stdin = None;
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait()? {
                return Ok(Some(status));
            }
            if Instant::now() >= deadline {
                let _ = self.child.kill();
                let _ = self.child.wait();
                return Ok(None);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl Drop for ChildLines {
    fn drop(&mut self) {
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

struct Session {
    io: ChildLines,
    next_id: u64,
    broken: Option<String>,
}

/// An external oracle process speaking the protocol over stdin/stdout.
///
/// Requests are strictly serial. After a transport failure or a timeout the
/// session is unusable; there are no retries.
pub struct StdioBackend {
    session: Mutex<Session>,
    kind: LabelKind,
    name: String,
    timeout: Duration,
}

impl StdioBackend {
    /// Starts `argv` and performs the handshake.
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let mut io = ChildLines::spawn(argv)?;
        io.send_raw(&Request::Hello.to_line())?;
        let line = io.recv(timeout)?;
        match parse_reply(&line)? {
            Reply::Hello { kind, name } => Ok(Self {
                session: Mutex::new(Session {
                    io,
                    next_id: 0,
                    broken: None,
                }),
                kind,
                name,
                timeout,
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

    /// Sends `bye` and waits for the process to exit.
    pub fn shutdown(&self) -> Result<ExitStatus> {
        let mut s = self.session.lock().unwrap_or_else(|p| p.into_inner());
        s.broken = Some("session shut down".into());
        s.io.send_raw(&Request::Bye.to_line())?;
        s.io
            .finish(self.timeout)?
            .ok_or_else(|| Error::Transport("oracle did not exit after bye".into()))
    }
}

impl Drop for StdioBackend {
    fn drop(&mut self) {
        if let Ok(s) = self.session.get_mut() {
            if s.broken.is_none() && s.io.send_raw(&Request::Bye.to_line()).is_ok() {
                let _ = s.io.finish(Duration::from_secs(1));
            }
        }
    }
}

impl Backend for StdioBackend {
    fn kind(&self) -> LabelKind {
        self.kind
    }

    fn accepts_prompt(&self) -> bool {
        true
    }

    fn predict(&self, prompt: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        let mut s = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(why) = &s.broken {
            return Err(Error::Transport(format!("session unusable: {why}")));
        }
        let id = s.next_id;
        s.next_id += 1;
        let req = Request::Predict {
            id,
            prompt: prompt.map(<[u32]>::to_vec),
            input: input.to_vec(),
        };
        let exchange = s.io.send_raw(&req.to_line()).and_then(|_| s.io.recv(self.timeout));
        let line = match exchange {
            Ok(line) => line,
            Err(e) => {
                s.broken = Some(e.to_string());
                return Err(e);
            }
        };
        check_result(parse_reply(&line)?, id, self.kind, &line)
    }
}

/// Validates a predict reply against the request id and declared kind.
pub(crate) fn check_result(reply: Reply, id: u64, kind: LabelKind, line: &str) -> Result<Label> {
    let bad = |msg: String| Error::Protocol {
        msg,
        line: line.to_owned(),
    };
    match reply {
        Reply::Result { id: got, label } => {
            if got != id {
                return Err(bad(format!("reply id {got} does not match request id {id}")));
            }
            if label.kind() != kind {
                return Err(bad(format!("session declared {kind} but reply carries {}", label.kind())));
            }
            Ok(label)
        }
        Reply::Error { msg, .. } => Err(bad(format!("oracle reported an error: {msg}"))),
        Reply::Hello { .. } => Err(bad("unexpected hello reply".into())),
    }
}
