mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use glassvae_core::Error;

use args::Cli;
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 4,
            CliError::CheckFailed(_) => 3,
            CliError::Core(e) => match e {
                Error::Argument(_) | Error::InvalidCutoff { .. } => 2,
                e if e.is_numerical() => 3,
                Error::DegenerateGraph(_) | Error::Shape { .. } => 3,
                _ => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "failed checks: {m}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match cli.command.overrides() {
        Some(o) => RunConfig::resolve(o.config.as_deref(), o)?,
        None => RunConfig::default(),
    };
    commands::execute(&cli.command, cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLASSVAE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glassvae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
