//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A variable index or value is outside the schema.
    #[error("schema violation: {0}")]
    SchemaViolation(String),

    /// Exact enumeration was requested for a state space over the guard.
    #[error("state space too large: {states} states exceeds limit {limit}")]
    StateSpaceTooLarge { states: u128, limit: u64 },

    #[error("empty dataset")]
    EmptyDataset,

    /// An operation restricted to binary variables saw a wider arity.
    #[error("unsupported schema: {0}")]
    UnsupportedSchema(String),

    /// A conditional probability needed in a denominator is not positive.
    #[error("non-positive conditional probability: {0}")]
    NonPositive(String),

    #[error("feature too long: {len} tests exceeds bound {bound}")]
    FeatureTooLong { len: usize, bound: usize },

    /// Structural validation failure (bad permutation, malformed CPD, ...).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
