//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failures surfaced by layers, flows, training, and I/O.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// An input value lies outside the mathematical domain of an
    /// operation (non-finite batch entries, probabilities outside [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (shape mismatch, too few samples,
    /// invalid configuration value).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical procedure failed to converge or produced non-finite
    /// intermediate values (bracket expansion, NaN loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input data (CSV parse failures carry a line number).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A checkpoint written by an incompatible format version.
    #[error("checkpoint format version mismatch: found {found:?}, expected {expected:?}")]
    CheckpointVersion { found: String, expected: String },

    /// A structurally invalid checkpoint document.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Prefix the message of a wrapped-string variant with the flow
    /// layer pair it surfaced in; structured variants pass through.
    pub(crate) fn at_layer_pair(self, l: usize) -> Self {
        match self {
            Error::Domain(m) => Error::Domain(format!("layer pair {l}: {m}")),
            Error::Contract(m) => Error::Contract(format!("layer pair {l}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("layer pair {l}: {m}")),
            other => other,
        }
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
