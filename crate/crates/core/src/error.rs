//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by corpus handling, model evaluation, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A corpus file line could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A label string was not present in the label vocabulary built from the
    /// train split.
    #[error("unknown label {0:?} (label vocabulary is fixed from the train split)")]
    UnknownLabel(String),

    /// Rank correlation is undefined because one ranking is entirely tied.
    #[error("degenerate ranking: all values tied in at least one input")]
    DegenerateRanking,

    /// The training loss became non-finite or exceeded the divergence bound.
    #[error(
        "training diverged at step {step}: ce={ce}, adv={adv}, vat={vat}, total={total}"
    )]
    Diverged {
        step: u64,
        ce: f64,
        adv: f64,
        vat: f64,
        total: f64,
    },

    /// A checkpoint file was malformed or inconsistent with the parameters.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
