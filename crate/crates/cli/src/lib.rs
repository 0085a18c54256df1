//! The `mgno` command line.
//!
//! Exit codes: 0 success, 1 failure (a threshold not met, or a runtime
//! error such as a diverged training run), 2 usage or validation error.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{eval_split, run};
pub use config::{RunConfig, SplitName, RUN_SCHEMA};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Threshold(String),

    #[error(transparent)]
    Core(#[from] mgno::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Threshold(_) => 1,
            CliError::Core(e) => match e {
                mgno::Error::InvalidArgument(_)
                | mgno::Error::ShapeMismatch(_)
                | mgno::Error::Format(_)
                | mgno::Error::Json(_) => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    L2,
    H1,
}

impl From<LossArg> for mgno::train::LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L2 => mgno::train::LossKind::RelL2,
            LossArg::H1 => mgno::train::LossKind::RelH1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TyingArg {
    Finest,
    Coarsest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    GeluSign,
}

#[derive(Debug, Parser)]
#[command(name = "mgno", version, about = "Multigrid neural operator runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Iterate the classical multigrid preset on a Poisson problem and fit its contraction factor.
    SolvePoisson {
        /// Mesh intervals per side; the interior grid is one smaller.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Ratios entering the fit (default: all).
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a Darcy dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the master seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        verbose: bool,
    },
    /// Train a network from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.loss`.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a dataset at its training resolution.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `test`, or the whole dataset when it has no test split.
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Score a checkpoint on finer data by adding multigrid levels.
    Superres {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_hi: PathBuf,
        #[arg(long)]
        extra_levels: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        #[arg(long, value_enum, default_value = "finest")]
        tying: TyingArg,
    },
    /// Compare analytic gradients of a small network with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "h1")]
        loss: LossArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}
