use thiserror::Error;

use crate::paillier::CryptoError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("forecast block C of component {component} is singular; cannot condition")]
    Conditioning { component: usize },

    #[error("component {component} collapsed: total responsibility {mass:e}")]
    ComponentCollapse { component: usize, mass: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("topology: {0}")]
    Topology(String),

    #[error("consensus did not converge in {rounds} rounds (residual spread {residual:e})")]
    NonConvergence { rounds: usize, residual: f64 },

    #[error("broadcast integrity: entry {index} is {residual:e} away from an integer")]
    BroadcastIntegrity { index: usize, residual: f64 },

    #[error("Gram estimate of component {component} has eigenvalue {eigenvalue:e}; increase the hash length")]
    HashBudget { component: usize, eigenvalue: f64 },

    #[error(transparent)]
    Crypto(#[from] CryptoError),

    #[error("node {node} failed at tick {tick}: {reason}")]
    Simulation {
        node: usize,
        tick: u64,
        reason: String,
    },

    #[error("{context}: {source}")]
    Protocol {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the protocol step it came from, e.g. `"e-step tau (j=2)"`.
    pub fn in_context(self, context: impl Into<String>) -> Error {
        Error::Protocol {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error after peeling protocol context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Protocol { source, .. } => source.root(),
            other => other,
        }
    }
}
