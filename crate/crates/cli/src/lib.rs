//! Command-line front end: phantom generation, training, evaluation and checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::run;
pub use config::{parse_alphas, parse_dims, EvalModality, Role, RunConfig, SEED_ENV};
pub use error::{CliError, EXIT_CHECK, EXIT_CONFIG, EXIT_INTERNAL, EXIT_IO, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "fuseseg", version, about = "3D tissue segmentation with two-teacher weight fusion")]
pub struct Cli {
    /// Flat `key = value` file; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Falls back to the FUSESEG_SEED environment variable, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic subjects as `<out>/subjNN_{t1,t2,labels}.volb`.
    Generate {
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a teacher (t1, t2) or the fuse model.
    Train {
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// eq5, constant:<v> or schedule
        #[arg(long)]
        alpha_mode: Option<String>,
        /// sum or mean
        #[arg(long)]
        fuse_mode: Option<String>,
        /// joint or sequential
        #[arg(long)]
        teachers: Option<String>,
        #[arg(long)]
        tm1: Option<PathBuf>,
        #[arg(long)]
        tm2: Option<PathBuf>,
        /// Trailing subjects held out for validation.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        val_every: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stitched whole-volume Dice of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        step: Option<usize>,
        /// t1, t2 or both
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and of a small model.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage and total parameter counts.
    Paramcount {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One fuse run per fusing coefficient.
    Ablate {
        /// Comma-separated constants and/or eq5, schedule.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        fuse_mode: Option<String>,
        #[arg(long)]
        tm1: Option<PathBuf>,
        #[arg(long)]
        tm2: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
