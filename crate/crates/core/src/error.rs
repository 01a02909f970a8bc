use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes in {0}: expected TFT1")]
    BadMagic(PathBuf),

    #[error("truncated tensor file {path}: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("tensor contains non-finite values")]
    NonFinite,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Invalid input or configuration. Maps to exit code 2 in the CLI.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("identifiability violated: {0}")]
    Identifiability(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The optimizer produced a non-finite objective; the last finite iterate is kept.
    #[error("objective diverged after {iterations} iterations (last finite value {last_value})")]
    Diverged {
        iterations: usize,
        last_value: f64,
        last_iterate: Box<nalgebra::DMatrix<f64>>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Identifiability(_) | Error::Shape(_) | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
