//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A value lies outside the operation's domain (e.g. a label >= class count).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    /// API misuse, such as calling backward on a non-scalar node.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The sparsity budget cannot hold the mandatory blocks.
    #[error("infeasible sparsity {requested}: mandatory blocks need at least {min_feasible:.6}")]
    Infeasible { requested: f64, min_feasible: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid run configuration, naming the offending field.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
