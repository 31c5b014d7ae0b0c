use std::process::ExitCode;

use clap::Parser;
use pso_cli::cli::Cli;
use pso_cli::commands::execute;
use pso_core::Error;

/// Machine-readable error kind and exit code.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Domain(_) => ("domain", 3),
                Error::Contract(_) => ("contract", 3),
                Error::Parse(_) => ("parse", 4),
                Error::Io(_) => ("io", 5),
                Error::Compatibility(_) => ("compatibility", 6),
                Error::NonFinite { .. } | Error::SingularConversion { .. } | Error::Diverged { .. } => {
                    ("numeric", 7)
                }
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 5);
        }
    }
    ("other", 1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match execute(cli, &argv) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            eprintln!("wrote {}", outcome.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
