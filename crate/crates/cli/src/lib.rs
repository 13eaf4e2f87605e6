//! The `mode-dyn` command line: dataset generation, fitting, rollouts,
//! evaluation and the benchmark suites.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod error;
pub mod tasks;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mode-dyn", version, about = "Mixtures of dynamical experts for snapshot data")]
pub struct Cli {
    /// INI or JSON config with [generator], [local], [global], [rollout] and [eval] sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every section; overrides the config file and MODE_DYN_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or model/report file for fit and evaluate).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark dataset (train/val CSVs and meta.json).
    Generate(GenerateArgs),
    /// Fit MODE-Local or MODE-Global to a dataset directory.
    Fit(FitArgs),
    /// Simulate a fitted model from initial states.
    Rollout(RolloutArgs),
    /// Score fitted models against a dataset.
    Evaluate(EvaluateArgs),
    /// Run a benchmark suite.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// bistable, lotka_volterra, lorenz, goldbeter_exit or branching.
    #[arg(long)]
    pub system: Option<String>,
    /// Total rows before the split.
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise level added after normalization.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Training fraction.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "local")]
    pub variant: tasks::Variant,
    /// Dataset directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Hyperparameter preset: toy_branching, goldbeter, lineage or fucci.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    /// Lasso strength of the local M-step.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds in a gated ensemble (global only).
    #[arg(long, default_value_t = 1)]
    pub ensemble: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: tasks::Precision,
    /// Exit 3 when EM does not converge.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Initial states CSV (columns x0..x{d-1}).
    #[arg(long, value_name = "PATH", conflicts_with = "from_data")]
    pub init: Option<PathBuf>,
    /// Draw initial states uniformly from a dataset's training rows.
    #[arg(long, value_name = "DIR")]
    pub from_data: Option<PathBuf>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub sigma_b: Option<f64>,
    /// sample or argmax.
    #[arg(long)]
    pub policy: Option<String>,
    /// Add pi_0..pi_{K-1} columns.
    #[arg(long)]
    pub record_gates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Clustering,
    Forecast,
    Recovery,
    Auc,
    Calibration,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Model files; forecasting accepts several (e.g. MODE and K=1).
    #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Expert scored by auc and calibration (default: the one favored by label-1 rows).
    #[arg(long)]
    pub expert: Option<usize>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub sigma_b: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum)]
    pub suite: benchmark::Suite,
    /// Seeds per cell (defaults: clustering 5, forecasting 3, recovery 10, robustness 1).
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    /// Cap on training epochs of gated fits.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::usage(e.render().to_string()));
        }
    };
    commands::dispatch(cli)
}
