use std::path::PathBuf;

use thiserror::Error;

/// Shape of a 2-D tensor, printed as `rows×cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("unmatched cases in strata: {unmatched:?}")]
    PartialMatch { unmatched: Vec<String> },

    #[error(
        "training diverged at iteration {iteration} (loss {loss}); try a smaller learning rate"
    )]
    Divergence { iteration: usize, loss: f64 },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::Dimension { op, left, right }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
