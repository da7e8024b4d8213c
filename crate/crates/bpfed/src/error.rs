//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library and the CLI runner.
#[derive(Debug, Error)]
pub enum BpfedError {
    /// An argument violated a documented precondition (NaN input, empty
    /// vector where data is required, inconsistent dimensions, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two buffers that must agree in length did not.
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// A binary or text input file did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A data partition could not be satisfied from the available pools.
    #[error("allocation error: {0}")]
    Allocation(String),

    /// A client shard or dataset was empty where samples are required.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// Local training produced a non-finite or absurdly large gradient.
    #[error("training diverged on client {client_id} at round {round}: {detail}")]
    Diverged {
        client_id: usize,
        round: usize,
        detail: String,
    },

    /// A configuration file or flag set could not be validated.
    #[error("config error: {0}")]
    Config(String),

    /// A closed-form expression was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, BpfedError>;
