//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Errors carry enough context
//! (names, shapes, paths, byte counts) to diagnose a failure without a
//! debugger; none of them panic-wrap.

use std::path::PathBuf;

/// Errors produced by the model, data, training, and search layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor construction or an op received incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An op argument is outside its supported domain (stride, kernel, rate ...).
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Non-finite values where finite ones are required.
    #[error("non-finite values in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// An architecture spec failed validation.
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    /// A run/schedule/search configuration failed validation. Lists every
    /// problem found, one per line.
    #[error("invalid configuration:\n{}", issues.join("\n"))]
    InvalidConfig { issues: Vec<String> },

    /// Training aborted because the loss or a gradient went non-finite.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    /// Dataset file missing, truncated, or malformed.
    #[error("dataset error for {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    /// Checkpoint file malformed, truncated, or from an unknown version.
    #[error("checkpoint error for {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    /// Checkpoint state does not match the model it is being restored into.
    #[error("checkpoint/model mismatch: {0}")]
    CheckpointMismatch(String),

    /// A candidate model would exceed the configured memory budget.
    #[error("memory budget exceeded: {detail}")]
    MemoryBudget { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite { op, detail: detail.into() }
    }
}
