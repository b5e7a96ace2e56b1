//! Reference oracle server.
//!
//! `taskvec-oracle <profile.json>` speaks the protocol on stdin/stdout.
//! `taskvec-oracle --http <addr> <profile.json>` serves it over HTTP and
//! prints the bound address on stderr.

use std::io::{stdin, stdout, BufWriter};
use std::net::TcpListener;
use std::path::Path;
use std::process::ExitCode;

use taskvec::oracles::profile::OracleProfile;
use taskvec::oracles::{protocol, serve_http};

fn run(args: &[String]) -> Result<(), String> {
    match args {
        [path] => {
            let profile = OracleProfile::load(Path::new(path)).map_err(|e| e.to_string())?;
            let backend = profile.backend();
            protocol::serve(stdin().lock(), BufWriter::new(stdout().lock()), backend.as_ref(), &profile.name)
                .map_err(|e| e.to_string())
        }
        [flag, addr, path] if flag == "--http" => {
            let profile = OracleProfile::load(Path::new(path)).map_err(|e| e.to_string())?;
            let listener = TcpListener::bind(addr).map_err(|e| format!("bind {addr}: {e}"))?;
            eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
            serve_http(listener, profile.backend().as_ref(), &profile.name).map_err(|e| e.to_string())
        }
        _ => Err("usage: taskvec-oracle [--http <addr>] <profile.json>".into()),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("taskvec-oracle: {e}");
            ExitCode::from(2)
        }
    }
}
