use std::process::ExitCode;

use clap::Parser;
use uhr_core::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = std::env::var("UHR_SEED").ok();
    match execute(&cli, seed.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
