//! A small decoder-only transformer trained from scratch on encoded episodes:
//! hand-written forward and backward passes, AdamW, learning-rate schedules,
//! a seeded epoch loop and binary checkpoints.

pub mod checkpoint;
pub(crate) mod ops;
pub mod optim;
pub mod schedule;
pub mod trainer;
pub mod transformer;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use ops::argmax;
pub use optim::{AdamW, OptimizerConfig, ScheduleUnit};
pub use schedule::{lr_schedule, Scheduler};
pub use trainer::{evaluate, evaluate_with_loss, mean_loss, EpochStats, Example, Prediction, Trainer};
pub use transformer::{content_positions, Logits, ModelConfig, Positional, Segment, Transformer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token {token} at position {position} is outside the vocabulary")]
    TokenOutOfRange { token: u8, position: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("label {0} is outside the class range")]
    LabelOutOfRange(usize),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
