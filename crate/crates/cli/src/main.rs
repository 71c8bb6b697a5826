//! `pfseg` — train, evaluate, and audit the prior-fusion segmentation
//! models from the command line.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 data
//! error, 3 numerical failure.

mod commands;
mod config;
mod ops_check;

use clap::{Parser, Subcommand};
use pfseg_core::{CheckpointError, DataError, TensorError, TrainError};

#[derive(Parser)]
#[command(name = "pfseg", version, about = "Prior-fusion semantic segmentation harness")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a synthetic scene dataset and write it as PPM + manifest
    GenData(commands::GenDataArgs),
    /// Train one variant and write a checkpoint plus a loss log
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset; optionally render predictions
    Eval(commands::EvalArgs),
    /// Print parameter accounting per layer or across all variants
    Params(commands::ParamsArgs),
    /// Finite-difference gradient checks for the tape ops
    Gradcheck(commands::GradcheckArgs),
    /// Train and evaluate several variants across seeds; summarize as CSV
    Compare(commands::CompareArgs),
}

/// Error carrying its exit code; every command funnels into this.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2; the documented usage-error code is 1.
            let _ = e.print();
            std::process::exit(1);
        }
    };
    let result = match &cli.command {
        Commands::GenData(args) => commands::gen_data(args),
        Commands::Train(args) => commands::train(args),
        Commands::Eval(args) => commands::eval(args),
        Commands::Params(args) => commands::params(args),
        Commands::Gradcheck(args) => commands::gradcheck(args),
        Commands::Compare(args) => commands::compare(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
