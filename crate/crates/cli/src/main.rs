use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

mod backend;
mod cli;
mod commands;
mod config;
mod error;
mod replay;
mod workspace;

use cli::{Cli, Command};
use config::Config;
use error::{CliError, CliResult};

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    match &cli.command {
        Command::Replay(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| CliError::Config("replay needs --out".into()))?;
            let report = replay::replay(&args.manifest, out)?;
            println!(
                "replay ok: {} reproduced {} artifacts in {}",
                report.command,
                report.artifacts,
                report.out.display()
            );
        }
        command => {
            commands::dispatch(cfg, command)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
