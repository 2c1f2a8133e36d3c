use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node} ({op}): expected shape {expected:?}, got {actual:?}")]
    Shape {
        node: usize,
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },

    #[error("graph: {0}")]
    Graph(String),

    #[error("score schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invalid score: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: usize, term: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable kind, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Graph(_) => "graph",
            Error::Schema { .. } => "schema",
            Error::Validation(_) => "validation",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
