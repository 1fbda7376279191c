//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("{op}: shape mismatch, lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A precondition stated by an operation's contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Index out of range (class labels, tensor ids).
    #[error("index out of range: {what} = {index}, valid range is 0..{bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (first offending layer: {layer})")]
    NonFinite { step: usize, layer: String },

    /// Malformed or unreadable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Self {
        Error::Shape {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
