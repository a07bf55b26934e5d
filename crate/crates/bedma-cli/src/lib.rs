//! Command-line front end for the bedma forecaster.
//!
//! The binary exposes five subcommands: `train`, `evaluate`, `predict`,
//! `benchmark`, and `gradcheck`. All of them are thin wrappers over the
//! functions in [`commands`], so integration tests drive the same code
//! paths in-process. Failures are sorted into coarse classes, each with
//! its own exit code, so scripts can react without parsing messages.

use bedma::data::DataError;
use bedma::metrics::MetricsError;
use bedma::model::checkpoint::CheckpointError;
use bedma::model::ModelError;
use bedma::training::TrainingError;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{DataConfig, Overrides, RunConfig, SourceKind};

/// Everything that can go wrong, sorted by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or inconsistent configuration (exit 1).
    #[error("invalid config: {0}")]
    Config(String),
    /// Unreadable or malformed inputs: series files, checkpoints (exit 2).
    #[error("data error: {0}")]
    Data(String),
    /// A numeric failure during training or evaluation (exit 3).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// One or more benchmark cells failed (exit 4).
    #[error("{failed} of {total} benchmark cells failed")]
    Benchmark { failed: usize, total: usize },
    /// A gradient check exceeded tolerance (exit 5).
    #[error(
        "gradient check failed in component {component}: worst case {case} \
         has relative error {err:.3e}"
    )]
    Gradcheck {
        component: String,
        case: String,
        err: f64,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Benchmark { .. } => 4,
            CliError::Gradcheck { .. } => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(format!("checkpoint: {e}"))
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(format!("metrics: {e}"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(format!("model: {e}"))
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFinite { epoch, batch } => CliError::Numeric(format!(
                "loss became non-finite at epoch {epoch}, batch {batch}"
            )),
            other => CliError::Config(format!("train: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
