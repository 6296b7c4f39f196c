//! `resadapt` command line: dataset generation, training, evaluation and
//! decathlon scoring driven by one JSON experiment config.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub mod commands;
pub mod config;

pub use config::{ExperimentConfig, Layout, OUTPUT_ENV};

/// The five-domain desk fixture.
pub const DESK_DECATHLON_CFG: &str = include_str!("../configs/desk-decathlon.cfg");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "resadapt", version, about = "Multi-domain classification with residual adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate every configured synthetic domain.
    Gen(GenArgs),
    /// Train one protocol and write a checkpoint and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a results file.
    Eval(EvalArgs),
    /// Score a results file against baselines.
    Score(ScoreArgs),
    /// Train the domain classifier used by predicted-domain evaluation.
    PredictDomainTrain(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overwrite existing datasets.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// scratch, feature-extract, finetune, bn-adapt, res-adapt or joint-round-robin.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Domain to train; repeat for joint training. Defaults to every configured domain.
    #[arg(long = "domain")]
    pub domains: Vec<String>,
    /// Source checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight decay of the trained domain.
    #[arg(long)]
    pub decay: Option<f64>,
    /// Output stem under checkpoints/ and reports/.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Oracle,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Domain to evaluate; repeatable. Defaults to every configured domain.
    #[arg(long = "domain")]
    pub domains: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "oracle")]
    pub mode: ModeArg,
    /// Domain predictor checkpoint (predicted mode).
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Output stem under results/.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, required_unless_present = "published_vectors")]
    pub results: Option<PathBuf>,
    /// Baselines file: domain -> {e_max, gamma, max_points}.
    #[arg(long, conflicts_with = "reference")]
    pub baselines: Option<PathBuf>,
    /// Reference results; baselines become factor times their errors.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub factor: f64,
    /// Score the published Aircraft and ImageNet rows and compare.
    #[arg(long, conflicts_with_all = ["results", "baselines", "reference"])]
    pub published_vectors: bool,
    /// Directory for the score table and record.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Domains to tell apart; defaults to every configured domain.
    #[arg(long = "domain")]
    pub domains: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "domain-predictor")]
    pub name: String,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
