use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Shape { line: Option<usize>, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// No candidate size kept the condition/machine overlap under the gate.
    /// Carries the evaluated `(n_i, overlap_ratio)` curve.
    #[error("overlap gate failed at every candidate size: {curve:?}")]
    GateFailure { curve: Vec<(usize, f64)> },

    #[error("adversarial collapse: {0}")]
    Collapse(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

/// Checks that a vector has the expected length.
pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
