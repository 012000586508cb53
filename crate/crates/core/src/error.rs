//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any padkit module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("step index {t} out of range for schedule with {num_steps} steps")]
    StepOutOfRange { t: usize, num_steps: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("encoder hash mismatch: bank was built with {expected}, query encoded with {actual}")]
    EncoderHashMismatch { expected: String, actual: String },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("metric requires both classes present in labels")]
    SingleClass,

    #[error("insufficient data: needed {needed}, found {available} ({what})")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
