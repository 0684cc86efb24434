use std::process::ExitCode;

use clap::Parser;
use hmtkt::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(&Cli::parse()))
}
