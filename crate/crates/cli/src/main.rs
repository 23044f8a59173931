//! `vemis` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed `--gate`),
//! 2 usage error.

mod data;
mod drive;
mod manifest;
mod model;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vemis", version, about = "Surrogate vehicle emission models: extraction, training, validation and eco-driving")]
struct Cli {
    /// TOML config file with one table per subcommand; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads [default: available parallelism, 1 for train]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract per-second emissions for a range of scenarios into partition files
    Extract(data::ExtractArgs),
    /// Factor-response curves and sensitivity ratios of a dataset
    Stats(data::StatsArgs),
    /// Write a suite of synthetic driving cycles
    GenCycles(data::GenCyclesArgs),
    /// Train surrogate networks on an extracted dataset
    Train(model::TrainArgs),
    /// Evaluate a trained family at one point
    Predict(model::PredictArgs),
    /// Cross-product validation of cycle totals against the reference model
    Validate(model::ValidateArgs),
    /// Eco-driving: closed-loop intersection approach or environment sweep
    Ecodrive(drive::EcodriveArgs),
}

/// Bad input from the user; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_jobs = match cli.command {
        Command::Train(_) => 1,
        _ => 0,
    };
    let jobs = cli.jobs.unwrap_or(default_jobs);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Extract(a) => data::extract(a, config),
        Command::Stats(a) => data::stats(a, config),
        Command::GenCycles(a) => data::gen_cycles(a, config),
        Command::Train(a) => model::train(a, config),
        Command::Predict(a) => model::predict(a, config),
        Command::Validate(a) => model::validate(a, config),
        Command::Ecodrive(a) => drive::ecodrive(a, config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
