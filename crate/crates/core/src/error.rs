use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design matrix of task {task} is rank deficient and no ridge was given")]
    RankDeficient { task: usize },

    #[error("matrix is not symmetric (entry ({row}, {col}) differs from its transpose)")]
    Asymmetric { row: usize, col: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error(
        "linear solve did not converge in {iterations} iterations (relative residual {residual:.3e}, tolerance {tol:.1e})"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("{path}: row {row}, column '{column}': {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::NotPositiveDefinite
                | Error::Degenerate(_)
                | Error::RankDeficient { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
