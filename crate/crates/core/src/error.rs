//! Error taxonomy shared across the pipeline.
//!
//! Variants map one-to-one onto the CLI's exit codes: config, data,
//! transport and numeric failures are distinguishable by callers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between tensors.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (caller bug, not bad input data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter value is outside its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Malformed or inconsistent input data (manifests, images, labels).
    #[error("data error: {0}")]
    Data(String),

    /// External backend unreachable or returned a malformed response.
    #[error("transport error: {0}")]
    Transport(String),

    /// Non-finite values or divergence during numerical work.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
