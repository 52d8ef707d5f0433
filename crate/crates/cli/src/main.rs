mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use gqsgd_core::Error;

/// What a subcommand reports back to `main`.
pub enum Status {
    Ok,
    ChecksFailed(usize),
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::InvalidArgument(_) | Error::Config(_) | Error::RefusedConfiguration(_))
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize(a) => commands::quantize(a),
        Command::Allreduce(a) => commands::allreduce(a),
        Command::Train(a) => commands::train(a),
        Command::Perf(a) => commands::perf(a),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed(k)) => {
            eprintln!("{k} check(s) failed");
            ExitCode::from(1)
        }
        Err(e) if is_usage(&e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
