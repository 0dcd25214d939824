mod bench;
mod csv_io;
mod error;
mod estimate;
mod generate;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

/// Oscillation mode estimation from multi-channel ringdown data.
#[derive(Debug, Parser)]
#[command(name = "modal-dekf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a ringdown scenario.
    Generate(generate::GenerateArgs),
    /// Estimate modes from a measurement CSV.
    Estimate(estimate::EstimateArgs),
    /// Run the Monte Carlo comparison.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Estimate(args) => estimate::run(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let CliError::Divergence { diagnostic, .. } = &err {
                eprintln!("{diagnostic}");
            }
            ExitCode::from(err.exit_code())
        }
    }
}
