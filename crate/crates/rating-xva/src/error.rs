//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data ingestion, matrix functions, calibration and
/// the Monte Carlo engines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("matrix logarithm undefined: eigenvalue {re}{im:+}i lies on the closed negative real axis")]
    LogBranchCut { re: f64, im: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix function overflow: {0}")]
    Overflow(String),

    #[error("calibration failed on interval {interval}: {message} (best objective {objective:.6e})")]
    Calibration {
        interval: usize,
        message: String,
        objective: f64,
    },

    #[error("generator extraction failed on interval {interval}: {message}")]
    Extraction { interval: usize, message: String },

    #[error("optimizer did not converge after {iterations} iterations (objective {objective:.6e})")]
    NonConvergence { iterations: usize, objective: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
