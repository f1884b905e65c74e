use thiserror::Error;

/// Errors raised across the simulator, relevance model and training loop.
#[derive(Debug, Error)]
pub enum RdarError {
    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("queue starved: no trajectory received within {0:?}")]
    Starved(std::time::Duration),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RdarError {
    pub fn numeric(location: impl Into<String>) -> Self {
        RdarError::Numeric {
            location: location.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, RdarError::Config(_) | RdarError::Argument(_))
    }
}

pub type Result<T> = std::result::Result<T, RdarError>;
