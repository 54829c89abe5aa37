//! Front end for the lab: argument parsing, parameter resolution, seeded
//! execution of one experiment, and persistence of its outputs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<fvlab_core::Error> for CliError {
    fn from(e: fvlab_core::Error) -> Self {
        use fvlab_core::Error as E;
        match e {
            E::Io(_) | E::Csv(_) | E::Json(_) | E::NoCoalescence(_) => CliError::Run(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fvlab", version, about = "Centered Fleming-Viot simulation and verification lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON parameter block for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every replica stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "fvlab-out")]
    pub out: PathBuf,
    /// Shorthand for `--set replicas=N` (`dual_replicas` for `duality`).
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Parameter override `key=value`, dotted keys for nested fields.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Forward Moran simulation.
    Moran,
    /// Draws from the stationary law of the centered Moran model.
    Invariant {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        pair_rate: Option<f64>,
    },
    /// Time-T population sampled backwards from a fixed start.
    Backward,
    /// Coupling experiment on a grid of horizons.
    Couple,
    /// Both sides of the duality identity.
    Duality,
    /// Semigroup test battery.
    Semigroup,
    /// Genealogy sampling: Kingman, look-down, or the infinite total time.
    Coalescent,
    /// Full acceptance suite.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Moran => "moran",
            Command::Invariant { .. } => "invariant",
            Command::Backward => "backward",
            Command::Couple => "couple",
            Command::Duality => "duality",
            Command::Semigroup => "semigroup",
            Command::Coalescent => "coalescent",
            Command::Verify => "verify",
        }
    }
}

/// Runs one invocation; the return value is the process exit code.
pub fn run(cli: Cli) -> u8 {
    match commands::execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fvlab {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
