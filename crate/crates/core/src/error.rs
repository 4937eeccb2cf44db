use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("{method} solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolveFailed {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("point ({x}, {y}) lies outside the unit square")]
    PointOutsideDomain { x: f64, y: f64 },

    #[error("series has zero variance")]
    ZeroVariance,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("failed to parse {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("missing files in {dir}: {missing:?}")]
    MissingFiles { dir: PathBuf, missing: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery, as opposed to bad input or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SolveFailed { .. }
                | Error::Factorization(_)
                | Error::ZeroVariance
        )
    }
}
