use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A task or hyperparameter lies outside its admissible range.
    #[error("parameter error: {0}")]
    Param(String),

    /// Random task generation could not satisfy its validity constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A caller broke an operation's precondition (wrong state, length mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite or diverging quantity appeared during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Prefix the message with training provenance such as `round 3, task 1`.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
