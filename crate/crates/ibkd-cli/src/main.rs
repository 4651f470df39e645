//! `ibkd` — reproducible distillation runs from the command line.
//!
//! Five subcommands cover the full experiment loop: `gen-synthetic` builds
//! a task directory, `distill` and `finetune` run the two training stages,
//! `evaluate` scores a checkpoint on retrieval or pair similarity, and
//! `diagnose` reports embedding geometry. Every training run writes a
//! manifest first, so it can be reproduced bit-for-bit later.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod fail;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::EvalTask;
use crate::fail::{runtime, usage, CliError};

#[derive(Parser)]
#[command(
    name = "ibkd",
    version,
    about = "Distill teacher embeddings into compact students"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic teacher/task directory
    GenSynthetic {
        /// Generator spec as JSON; omitted fields take defaults
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory to write the task files into (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train a fresh student against the teacher embeddings
    Distill {
        /// Training config as JSON; omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task directory produced by gen-synthetic
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
        /// Hidden layer widths, comma separated
        #[arg(long, value_delimiter = ',', default_value = "64")]
        hidden: Vec<usize>,
    },
    /// Stage 2: fine-tune a distilled checkpoint on supervised instances
    Finetune {
        /// Training config as JSON; omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input checkpoint from the distill stage
        #[arg(long)]
        ckpt: PathBuf,
        /// Task directory produced by gen-synthetic
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on retrieval or pair similarity
    Evaluate {
        /// Student checkpoint or embedding table to score
        #[arg(long)]
        ckpt: PathBuf,
        /// Task directory produced by gen-synthetic
        #[arg(long)]
        data: PathBuf,
        /// Which evaluation to run
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Ranking depth for MRR@k and Recall@k
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        /// Metric report path (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-query rankings as TSV (retrieval only)
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Report embedding geometry: alignment, uniformity, covariance
    Diagnose {
        /// Student checkpoint or embedding table to inspect
        #[arg(long)]
        ckpt: PathBuf,
        /// Task directory produced by gen-synthetic
        #[arg(long)]
        data: PathBuf,
        /// Diagnostic report path (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Covariance matrix CSV path (defaults to <out>.cov.csv)
        #[arg(long)]
        cov: Option<PathBuf>,
    },
}

/// Caps the worker pool when IBKD_THREADS is set; otherwise rayon uses
/// machine parallelism. Results never depend on the thread count.
fn init_thread_pool() -> Result<(), CliError> {
    match std::env::var("IBKD_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(usage(format!("IBKD_THREADS: {e}"))),
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                usage(format!(
                    "IBKD_THREADS must be a positive integer, got {v:?}"
                ))
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| runtime(format!("initializing thread pool: {e}")))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic { spec, out } => commands::gen(spec.as_deref(), &out),
        Command::Distill {
            config,
            data,
            out,
            hidden,
        } => commands::distill(config.as_deref(), &data, &out, &hidden),
        Command::Finetune {
            config,
            ckpt,
            data,
            out,
        } => commands::finetune(config.as_deref(), &ckpt, &data, &out),
        Command::Evaluate {
            ckpt,
            data,
            task,
            k,
            out,
            rankings,
        } => commands::evaluate(&ckpt, &data, task, k as usize, &out, rankings.as_deref()),
        Command::Diagnose {
            ckpt,
            data,
            out,
            cov,
        } => commands::diagnose(&ckpt, &data, &out, cov.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_thread_pool().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
