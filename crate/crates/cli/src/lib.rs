//! Command-line runner for TD / RsTD compression experiments.
//!
//! CSV contracts:
//! - `train`: `epoch,repetition,train_loss,test_accuracy`, one row per epoch
//!   and repetition, then `summary,all,<mean final train loss>,<mean final
//!   test accuracy>`.
//! - `sweep`: `kind,ranks,r_c,shuffled,mean_accuracy,std_accuracy`; ranks
//!   are dash-joined (`1-1-1-1`), accuracies are empty with
//!   `--accounting-only`.
//!
//! Reals are written in shortest round-trip form.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rstd_core::tdmodel::TopologyKind;
use rstd_core::Precision;

use crate::commands::{RunContext, SweepArgs};
use crate::config::{ExperimentConfig, DATA_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "rstd", version, about = "TD / RsTD convolution compression experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Experiment seed, overriding `training.seed` (noise seed for make-noisy).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (sweep: concurrent points sharing the pool).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,
    /// Dataset directory used when the config has no `dataset.path`.
    #[arg(long, global = true, env = DATA_DIR_ENV, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured network; writes the metrics CSV, checkpoint and permutation files.
    Train,
    /// Train TD and RsTD variants at every rank and write sweep.csv.
    Sweep {
        /// Comma-separated ranks, applied uniformly to every bond.
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        ranks: Vec<usize>,
        /// Decomposition to sweep (TT, TT-matrix, TR); defaults to `model.kind`.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<TopologyKind>,
        /// Add one uncompressed row (r_c = 1).
        #[arg(long)]
        include_uncompressed: bool,
        /// Only compute r_c; no data is read and nothing is trained.
        #[arg(long)]
        accounting_only: bool,
    },
    /// Write the AWGN-corrupted dataset in the standard binary layout.
    MakeNoisy {
        /// Noise standard deviation on the [0, 1] pixel scale; defaults to `dataset.noise_dev`.
        #[arg(long)]
        dev: Option<f64>,
    },
    /// Summarise train or sweep CSV files.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<TopologyKind, String> {
    s.parse().map_err(|e: rstd_core::Error| e.to_string())
}

fn context(g: &GlobalArgs) -> Result<RunContext> {
    let mut config = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &g.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = g.seed {
        config.training.seed = Some(seed);
    }
    Ok(RunContext {
        config,
        data_dir_default: g.data_dir.clone(),
        workers: g.workers,
        precision: match g.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        verbose: g.verbose,
    })
}

/// Runs one command, printing its summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(0) = cli.global.workers {
        anyhow::bail!(commands::UsageError("--workers must be at least 1".into()));
    }
    match cli.command {
        Command::Train => {
            let ctx = context(&cli.global)?;
            let s = commands::cmd_train(&ctx)?;
            println!("{}", s.line());
        }
        Command::Sweep {
            ranks,
            kind,
            include_uncompressed,
            accounting_only,
        } => {
            let ctx = context(&cli.global)?;
            let args = SweepArgs {
                ranks,
                kind,
                include_uncompressed,
                accounting_only,
            };
            let rows = commands::cmd_sweep(&ctx, &args)?;
            let rcs = rows.iter().map(|r| r.compression_ratio);
            let lo = rcs.clone().fold(f64::INFINITY, f64::min);
            let hi = rcs.fold(f64::NEG_INFINITY, f64::max);
            println!(
                "{} points, r_c from {lo} to {hi}, written to {}",
                rows.len(),
                ctx.config.output.dir.join(commands::SWEEP_FILE).display()
            );
        }
        Command::MakeNoisy { dev } => {
            let ctx = context(&cli.global)?;
            let dev = dev.unwrap_or(ctx.config.dataset.noise_dev);
            let seed = cli.global.seed.unwrap_or(ctx.config.dataset.noise_seed);
            let files = commands::cmd_make_noisy(&ctx, dev, seed)
                .with_context(|| format!("make-noisy into {}", ctx.config.output.dir.display()))?;
            println!("dev={dev} seed={seed}: wrote {} files to {}", files.len(), ctx.config.output.dir.display());
        }
        Command::Report { csv } => print!("{}", commands::cmd_report(&csv)?),
    }
    Ok(())
}
