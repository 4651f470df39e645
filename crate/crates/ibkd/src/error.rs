//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix shapes; names both shapes so the caller can see
    /// which operand is wrong.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Two paired sample sets disagree on row count.
    #[error("paired inputs disagree on sample count: {left} vs {right}")]
    Pairing { left: usize, right: usize },

    /// Too few samples for the operation to be defined.
    #[error("degenerate sample set: got {got} rows, need at least {need}")]
    Degenerate { got: usize, need: usize },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or inconsistent data (relevance entries, empty sets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content; names the byte offset or line where parsing failed.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Forward/backward cache does not match the model it is replayed against.
    #[error("state error: {0}")]
    State(String),

    /// Training aborted; records which batch produced the bad value.
    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
