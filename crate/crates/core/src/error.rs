use thiserror::Error;

/// Errors raised by the learning, propagation and planning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("kernel matrix is ill-conditioned (factorization failed at jitter {jitter:e})")]
    IllConditioned { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("propagation failed at time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("simulation diverged: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
