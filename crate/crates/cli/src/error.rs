use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] driftmask::Error),

    /// The disentangler ran but its overlap gate did not pass. Outputs
    /// were written before this is returned.
    #[error("{0}")]
    Gate(String),

    #[error("{0}")]
    Collapse(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GATE: i32 = 3;
pub const EXIT_COLLAPSE: i32 = 4;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use driftmask::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Argument(_)) => EXIT_USAGE,
            CliError::Gate(_) | CliError::Core(E::GateFailure { .. }) => EXIT_GATE,
            CliError::Collapse(_) | CliError::Core(E::Collapse(_)) => EXIT_COLLAPSE,
            CliError::Io { .. } | CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_taxonomy() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(driftmask::Error::Argument("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(driftmask::Error::Data("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(driftmask::Error::GateFailure { curve: vec![] }).exit_code(), 3);
        assert_eq!(CliError::Gate("x".into()).exit_code(), 3);
        assert_eq!(CliError::Core(driftmask::Error::Collapse("x".into())).exit_code(), 4);
    }
}
