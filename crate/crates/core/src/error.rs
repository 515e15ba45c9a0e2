//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter or configuration field violates its invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Matrix or vector dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear-algebra or iterative routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A constraint system admits no solution; the message carries diagnostics.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A bundle, CSV or config file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
