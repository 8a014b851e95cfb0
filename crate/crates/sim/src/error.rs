use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] adaptpoc_core::error::Error),
    #[error("scenario `{scenario}`: {failed} of {replications} replicates failed for {method} (first: {first})")]
    Aborted {
        scenario: String,
        method: String,
        failed: usize,
        replications: usize,
        first: String,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            SimError::Core(e) => e.is_numerical(),
            SimError::Aborted { .. } => true,
            _ => false,
        }
    }
}
