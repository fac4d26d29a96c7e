//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A filesystem operation failed.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A required file does not exist.
    #[error("not found: {0}")]
    NotFound(PathBuf),

    /// Stored data disagrees with its own metadata.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A stored format or dtype this crate does not read.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// An argument violated a precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// The spectrum is identically zero, so effective ranks are undefined.
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// A numerical routine failed (non-convergence, non-finite values).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Gradient descent blew up.
    #[error("training diverged at step {step}: loss {loss:e} (initial {initial:e})")]
    TrainingDiverged { step: usize, loss: f64, initial: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
