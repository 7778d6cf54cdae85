use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("infeasible construction: {0}")]
    Infeasible(String),

    #[error("posterior undefined: both joint probabilities are zero")]
    UndefinedPosterior,

    #[error("transition row for state `{state}` never visited")]
    UndefinedRow {
        state: &'static str,
        partial: crate::belief::TransitionMatrix<f64>,
    },

    #[error("reference cost {0} too close to zero for a ratio")]
    DegenerateRatio(f64),

    #[error("policy `{policy}` returned an invalid allocation: {reason}")]
    BadAllocation { policy: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
