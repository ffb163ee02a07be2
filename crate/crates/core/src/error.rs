//! Error type shared across the simulator.

use thiserror::Error;

/// Errors produced by the numeric core and the federated protocol.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss, gradient, or feature value became non-finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Degenerate input to a distance function (zero norm, zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration or argument value.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training aborted because the iterates stopped being finite.
    #[error("numeric divergence at round {round}, client {client_id}, step {step}: {detail}")]
    Divergence {
        round: usize,
        client_id: usize,
        step: usize,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
