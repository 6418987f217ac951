use thiserror::Error;

use crate::trainer::TrainingLog;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value showed up while unrolling or differentiating.
    #[error("numeric failure at step {step}: {what}")]
    NumericFailure { step: usize, what: String },

    /// Training hit a numeric failure it could not recover from.
    #[error("training failed after {} iterations: {source}", log.records.len())]
    TrainingFailure {
        #[source]
        source: Box<Error>,
        log: Box<TrainingLog>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numeric(step: usize, what: impl Into<String>) -> Self {
        Error::NumericFailure {
            step,
            what: what.into(),
        }
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
