use std::io;

use thiserror::Error;

/// Errors raised anywhere in the encoder stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("coordinate collision: {first} and {second} both map to {coord}")]
    CoordinateCollision {
        first: String,
        second: String,
        coord: String,
    },

    #[error("training fault at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("generator error: {0}")]
    Generator(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
