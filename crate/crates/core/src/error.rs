//! Error type shared by every module of the engine.

use std::io;

/// Errors raised by the compression engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, budgets, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Stored data is internally inconsistent (corrupted packing, bad snapshot).
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a contract violation.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;
