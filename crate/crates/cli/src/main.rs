//! `tbscreen`: the screening pipeline from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure (one JSON error line on stderr),
//! 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tbscreen_core::baseline::BaselineError;
use tbscreen_core::cam::CamError;
use tbscreen_core::dataset::DatasetError;
use tbscreen_core::eval::EvalError;
use tbscreen_core::train::TrainError;
use tbscreen_core::zoo::ZooError;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "tbscreen", version, about = "Tuberculosis screening on chest radiographs")]
pub struct Cli {
    /// Every artifact is written below this directory.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Seed for all randomness in the command; recorded in its outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan an image directory into a labeled manifest.
    Ingest(commands::IngestArgs),
    /// Stratified train/val/test split of a manifest.
    Split(commands::SplitArgs),
    /// Fine-tune a backbone.
    Train(commands::TrainArgs),
    /// Metrics and ROC from a scores file or a checkpoint.
    Eval(commands::EvalArgs),
    /// Activation heatmap overlays.
    Cam(commands::CamArgs),
    /// Fixed-feature linear classifier.
    Baseline(commands::BaselineArgs),
    /// Join end-to-end and feature-based reports into one table.
    Compare(commands::CompareArgs),
    /// Run the screening service.
    Serve(commands::ServeArgs),
    /// Parameter listings and training-run summaries.
    Report(commands::ReportArgs),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Service(#[from] tbscreen_service::ServiceError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Invalid(_) => "invalid_input",
            CliError::Dataset(_) => "dataset",
            CliError::Model(ZooError::WeightsUnavailable { .. }) => "weights_unavailable",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Cam(_) => "cam",
            CliError::Baseline(_) => "baseline",
            CliError::Service(_) => "service",
            CliError::Io { .. } => "io",
        }
    }
}

#[derive(Debug)]
pub struct Common {
    pub out_dir: PathBuf,
    pub seed: u64,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest(_) => "ingest",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Cam(_) => "cam",
        Command::Baseline(_) => "baseline",
        Command::Compare(_) => "compare",
        Command::Serve(_) => "serve",
        Command::Report(_) => "report",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .init();
    let name = command_name(&cli.command);
    let common = Common {
        out_dir: cli.out_dir,
        seed: cli.seed,
    };
    match commands::run(cli.command, &common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "command": name, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
