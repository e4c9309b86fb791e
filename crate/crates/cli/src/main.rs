//! Experiment driver for multi-view 6D pose estimation: generate
//! synthetic scene batches, run the estimation pipeline over them, and
//! score the results.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use mvpose_core::metrics::MetricsError;
use mvpose_core::scene::SceneError;

/// Failure classes, one exit code each, so scripts can branch on what
/// went wrong without parsing stderr.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag or config file; exit 2 (shared with clap usage errors).
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable, unwritable or malformed files; exit 3.
    #[error("io error: {0}")]
    Io(String),
    /// The estimation batch produced nothing usable; exit 4.
    #[error("batch error: {0}")]
    Batch(String),
    /// Schema version or provenance-hash mismatch between files; exit 5.
    #[error("schema error: {0}")]
    Schema(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Batch(_) => 4,
            CliError::Schema(_) => 5,
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::SchemaMismatch { .. } => CliError::Schema(e.to_string()),
            SceneError::Io(_) | SceneError::Parse(_) | SceneError::InvalidRecord(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mvpose", version, about = "Multi-view 6D pose estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a batch of synthetic multi-camera scenes.
    Simulate(SimulateArgs),
    /// Estimate object poses for every scene in a batch.
    Estimate(EstimateArgs),
    /// Score results against ground truth and emit a recall report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override simulator.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override simulator.view_count.
    #[arg(long)]
    pub views: Option<usize>,
    /// Override simulator.keypoints.
    #[arg(long)]
    pub keypoints: Option<usize>,
    /// Scene file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; the output is identical for any value.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Scene file produced by `simulate`.
    #[arg(long)]
    pub scene: PathBuf,
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override solver.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the nonlinear refinement stage.
    #[arg(long)]
    pub no_refine: bool,
    /// Results file to write; solve timings land in `<out>.timings.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; the results file is identical for any value.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Results file produced by `estimate`.
    #[arg(long)]
    pub results: PathBuf,
    /// Scene file holding the matching ground truth.
    #[arg(long)]
    pub scene: PathBuf,
    /// TOML config file; its [metrics] section picks the default metrics.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Metric to score: add, 5mm10deg or 2mm3deg. Repeatable; overrides
    /// the config.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    /// Report file to write; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Timings sidecar from `estimate`; fills the runtime column of the
    /// series block.
    #[arg(long)]
    pub timings: Option<PathBuf>,
    /// Print an aligned table instead of raw rows.
    #[arg(long)]
    pub pretty: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::Estimate(args) => commands::cmd_estimate(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
