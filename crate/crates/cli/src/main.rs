mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use evdl_core::Error;

use args::{expand_config, Cli};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::Io { .. }
        | Error::Unsupported(_) => EXIT_USAGE,
        Error::Domain(_) | Error::Shape { .. } | Error::UndefinedMetric(_) | Error::Diverged { .. } => {
            EXIT_RUNTIME
        }
    }
}

fn main() -> ExitCode {
    let (argv, config) = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let mut cli = Cli::parse_from(argv);
    cli.config = config;
    match commands::run(&cli) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
