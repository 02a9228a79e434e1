//! `globe`: data generation, training, inference, evaluation and property
//! verification for the boundary-kernel surrogate.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "globe", version, about = "Boundary-kernel PDE surrogate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching key of
/// the `--config` file.
#[derive(Debug, Args)]
struct Common {
    /// Root seed; data, init and subsampling use named sub-streams of it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file with model, training and run keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Targets (faces or queries) evaluated per tape during inference.
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Ordered reductions. Always in effect; accepted for scripts.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Cylinder,
    Laplace,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic samples and a manifest into `--out`.
    Gen {
        #[arg(value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        count: Option<usize>,
        /// Query points per sample.
        #[arg(long)]
        n_query: Option<usize>,
    },
    /// Train a model on every `*.globe` sample in `data`; writes the
    /// checkpoint to `--out` and the loss history next to it.
    Train {
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        wd: Option<f64>,
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// `auto`, `airfrans`, `cylinder` or `laplace`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Predict the fields at a sample's query points into a CSV.
    Infer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        sample: Option<PathBuf>,
    },
    /// Per-sample and aggregate error CSVs for a directory of samples.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        data: Option<PathBuf>,
    },
    /// Run a property suite (or `all`) on a checkpoint or a fresh model.
    Verify {
        suite: Option<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
