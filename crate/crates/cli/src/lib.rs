//! Command-line front end: argument parsing, run configuration and the
//! subcommands. `main.rs` only maps errors to exit codes.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wideffn::Error;

pub use commands::run;

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Precondition(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Shape { .. } | Error::Index { .. } => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "wideffn", version, about = "Train, compare and benchmark Transformers with shared, dropped or widened FFNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// FFN preset, overriding the file's `preset`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter count, percentage of the same-shape baseline and breakdown.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model shape; defaults to `big` when no config file is given.
        #[arg(long, value_enum)]
        shape: Option<config::Shape>,
        #[arg(long)]
        vocab: Option<usize>,
        /// Inner width of shared FFNs.
        #[arg(long)]
        d_ff_shared: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a loss curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write; the configuration goes next to it.
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss curve CSV (default `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Held-out loss, token accuracy, exact match and BLEU.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Pairwise module similarity between two models (or activation dumps).
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Re-seeded baselines compared against `a` to normalize scores.
        #[arg(long = "benchmark")]
        benchmarks: Vec<PathBuf>,
        #[arg(long, default_value = "cka")]
        metric: String,
        /// LNS neighborhood size (default 5% of the sentences).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// CKA self-similarity among one model's module outputs.
    Selfsim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Decoding throughput per batch size, relative to the first checkpoint.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// CSV destination (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per FFN width on one side and report accuracy.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        side: String,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
