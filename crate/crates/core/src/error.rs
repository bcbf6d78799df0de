use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty proposition")]
    EmptyProposition,

    #[error("unalignable proposition: {0:?}")]
    UnalignableProposition(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate embedding (zero norm)")]
    DegenerateEmbedding,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    UnknownTokenId { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Overlong { len: usize, max_len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("asymmetric or invalid positives map: {0}")]
    InvalidPositives(String),

    #[error("entailment oracle failed on pair (a={a}, b={b}): {message}")]
    Oracle { a: usize, b: usize, message: String },

    #[error("duplicate index key {0}")]
    DuplicateKey(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        last_good: Option<Box<crate::trainer::Checkpoint>>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::DegenerateEmbedding => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
