mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use prototransfer::Error;

use args::{Cli, Command};

/// A reportable failure: exit code, category and a one-line reason.
pub struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            kind: "numeric",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match e.root() {
            Error::Config(_) => (2, "config"),
            Error::NonFinite { .. } => (4, "numeric"),
            _ => (3, "data"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(a)?,
        Command::Finetune(a) => commands::finetune(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Ablate(a) => commands::ablate(a)?,
        Command::Gradcheck(a) => commands::gradcheck_cmd(a)?,
        Command::Convert(a) => commands::convert(a)?,
        Command::Defaults(a) => commands::defaults(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = f.message.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {line}", f.kind);
            ExitCode::from(f.code)
        }
    }
}
