use std::process::ExitCode;

use clap::Parser;
use mvq_cli::commands::{run, Cli, Outcome};

/// Exit codes: 0 success, 1 computation failure, 2 usage error (clap),
/// 3 an acceptance threshold failed under `--assert-acceptance`.
fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(f)) => {
            for reason in &f.0 {
                eprintln!("acceptance failed: {reason}");
            }
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {:#}", anyhow::Error::from(e));
            ExitCode::from(1)
        }
    }
}
