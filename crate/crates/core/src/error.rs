use thiserror::Error;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Fit,
}

#[derive(Debug, Error)]
pub enum CitError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid treatment value {value:?} at row {row}")]
    InvalidTreatment { row: usize, value: String },

    #[error("missing value in column {column:?} at row {row}")]
    MissingValue { row: usize, column: String },

    #[error("design spec error: {0}")]
    Spec(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("logistic fit failed: {0}")]
    LogisticFailed(String),

    #[error("empty subgroup")]
    EmptySubgroup,

    #[error("unseen categorical level {level:?} for column {column:?}")]
    UnseenLevel { column: String, level: String },

    #[error("inadmissible split: {0}")]
    Inadmissible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CitError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CitError::Config(_) | CitError::Spec(_) => ErrorClass::Config,
            CitError::Data(_)
            | CitError::InvalidTreatment { .. }
            | CitError::MissingValue { .. }
            | CitError::UnseenLevel { .. }
            | CitError::Io(_)
            | CitError::Csv(_)
            | CitError::Json(_) => ErrorClass::Data,
            CitError::InsufficientData(_)
            | CitError::DegenerateResponse(_)
            | CitError::LogisticFailed(_)
            | CitError::EmptySubgroup
            | CitError::Inadmissible(_) => ErrorClass::Fit,
        }
    }

    /// True for failures that only disqualify a candidate split.
    pub fn is_inadmissible(&self) -> bool {
        matches!(
            self,
            CitError::Inadmissible(_)
                | CitError::InsufficientData(_)
                | CitError::DegenerateResponse(_)
                | CitError::LogisticFailed(_)
                | CitError::EmptySubgroup
        )
    }
}

pub type Result<T> = std::result::Result<T, CitError>;
