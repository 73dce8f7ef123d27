//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

/// Errors produced by model construction, solvers, simulation, and I/O.
///
/// The variants are grouped so the CLI can map them onto its exit codes:
/// configuration and input problems exit with 1, numerical failures with 2,
/// and verification failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Invalid parameters, malformed configuration, or inconsistent inputs.
    #[error("validation: {0}")]
    Validation(String),

    /// Malformed input data (CSV/JSON parse problems), with file context.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A solver or estimator failed numerically (NaN, CFL explosion,
    /// degenerate likelihood, ...).
    #[error("numerical: {0}")]
    Numerical(String),

    /// A verification run completed but one or more checks failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        CoreError::Verification(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    /// Process exit code used by the `rldc` binary for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Validation(_) | CoreError::Parse { .. } | CoreError::Io { .. } => 1,
            CoreError::Numerical(_) => 2,
            CoreError::Verification(_) => 3,
        }
    }
}

impl Clone for CoreError {
    fn clone(&self) -> Self {
        match self {
            CoreError::Validation(m) => CoreError::Validation(m.clone()),
            CoreError::Parse { path, message } => {
                CoreError::Parse { path: path.clone(), message: message.clone() }
            }
            CoreError::Numerical(m) => CoreError::Numerical(m.clone()),
            CoreError::Verification(m) => CoreError::Verification(m.clone()),
            CoreError::Io { path, source } => CoreError::Io {
                path: path.clone(),
                source: std::io::Error::new(source.kind(), source.to_string()),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
