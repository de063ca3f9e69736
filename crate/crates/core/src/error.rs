use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Batch normalisation cannot train on a single sample; the caller
    /// skips the batch.
    #[error("batch of {0} sample(s) is too small for batch-norm training")]
    BatchTooSmall(usize),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged {
        iteration: usize,
        loss: f64,
        /// Curves recorded up to the last finite step.
        curves: Vec<crate::harness::CurvePoint>,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
