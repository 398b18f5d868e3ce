use std::path::PathBuf;

/// Errors produced anywhere in the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    /// `history` holds the mean training loss of every completed epoch.
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged {
        epoch: usize,
        term: String,
        history: Vec<f64>,
    },

    /// Some cells of an experiment run failed; the rest were written.
    #[error("{0}")]
    Incomplete(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
