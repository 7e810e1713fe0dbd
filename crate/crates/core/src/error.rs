//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`].  The variants map onto the
//! process exit codes used by the command-line front end: validation problems
//! (`Dimension`, `Contract`, `Data`) exit with 2, `Io`/`Format` with 3, and
//! `Numeric` with 4.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes (or graph/group sizes) do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed (bad CSV cell, unknown variable, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A value left the numeric domain (log of a non-positive number,
    /// non-finite loss, prior probability at 0 or 1, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted artifact (model archive, config) is malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code the command-line front end maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Contract(_) | Error::Data(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
