//! Experiment runner for `lrgrad`: TOML-configured training, robustness
//! evaluation and the gradient-similarity ablation, with CSV outputs.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod run;

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("inconsistent table: {0}")]
    Schema(String),

    #[error(transparent)]
    Core(#[from] lrgrad::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for divergence,
    /// 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(lrgrad::Error::Config(_)) => 2,
            CliError::Core(lrgrad::Error::Divergence(_)) => 3,
            _ => 1,
        }
    }
}

pub use ablation::{ablation_run, AblationConfig, SimilarityRow, Variant, VariantNoise};
pub use config::{DatasetSpec, ExperimentConfig, ModelSpec};
pub use metrics::{emit_metrics, read_metrics, Table};
pub use run::{prepare, run_ablate, run_evaluate, run_train, RunOptions};
