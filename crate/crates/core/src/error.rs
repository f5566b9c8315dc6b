use std::io;

use thiserror::Error;

/// Errors raised by the refinement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    OutOfRange { index: usize, extent: usize },

    #[error("{0}")]
    Loss(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("duplicate edit at slice {0}")]
    DuplicateSlice(usize),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
