//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (unknown shape family, bad hyperparameter, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Degenerate or out-of-contract shape parameters.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Tensor shape mismatch while building a graph.
    #[error("graph construction error: {0}")]
    Graph(String),

    /// A forward op produced NaN or Inf.
    #[error("numeric error in op `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// API misuse (backward on non-scalar, repeated backward, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint or file could not be read back.
    #[error("load error: {0}")]
    Load(String),

    /// Dataset contract violation (overlapping categories, missing labels).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Loss could not be evaluated (all samples skipped).
    #[error("loss error: {0}")]
    Loss(String),

    /// Evaluation failure (empty mesh where one is required).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
