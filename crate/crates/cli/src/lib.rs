//! Library side of the `alchemy-stages` command: configs, dataset files,
//! training runs, sweeps, evaluation, plot-data export and validation.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod export;
pub mod sweep;
pub mod train;
pub mod validate;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{path}:{line}: parse error: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("missing metric: {0}")]
    MissingMetric(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for config and validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Validation(_) | CliError::Parse { .. } | CliError::MissingMetric(_) => 1,
            CliError::Io(_) | CliError::Runtime(_) => 2,
        }
    }
}
