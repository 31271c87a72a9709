//! Crate-wide error type. Tensor-level failures pass through unchanged so
//! callers can still match on shape/finiteness problems from the math layer.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's arguments failed.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// A configuration file or dataset file could not be interpreted.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Tensor(#[from] dctensor::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
        Error::Invalid { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
