//! Crate-wide error and result types.
//!
//! Every fallible operation in this crate returns [`Result`]. The variants
//! partition failures by who can fix them: `Config` means the caller asked
//! for something inconsistent, `Dim` means operand shapes disagree, `Numeric`
//! means values went non-finite, `Format`/`Io`/`Data` cover file problems,
//! and `Contract` flags internal API misuse (a bug in calling code).

use thiserror::Error;

/// All errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent (conv extents, matmul inner dims,
    /// broadcast mismatches, checkpoint/config disagreements).
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid or contradictory configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated: non-scalar loss in `backward`, a frozen
    /// parameter that changed, mismatched pairing lengths, and similar.
    #[error("contract error: {0}")]
    Contract(String),

    /// Numeric failure: non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed container or dataset file.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset-level inconsistency: missing subjects, unpaired trials,
    /// id mismatches between files.
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure (including truncated container payloads).
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Truncated input: an I/O error by convention, even when parsing a
    /// byte slice that never touched a file.
    pub fn truncated(what: &str) -> Self {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated payload while reading {what}"),
        ))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
