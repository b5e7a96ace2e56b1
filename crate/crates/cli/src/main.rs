use std::process::ExitCode;

use clap::Parser;
use taskvec_cli::app::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("taskvec: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
