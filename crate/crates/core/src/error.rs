//! Crate-wide error type.
//!
//! Variants map one-to-one onto the failure contracts of the pipeline
//! operations; [`UqError::exit_code`] gives the process exit code the CLI
//! uses (0 success, 2 usage/validation, 3 backend failure, 4 degenerate
//! data).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UqError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend returned no token log-probabilities but they were required")]
    LogprobsMissing,

    #[error("remote judge unavailable: {0}")]
    RemoteJudgeUnavailable(String),

    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),

    #[error("sentence is empty")]
    EmptySentence,

    #[error("report is empty")]
    EmptyReport,

    #[error("sample set is empty")]
    EmptySampleSet,

    #[error("sample set has samples without token log-probabilities")]
    MissingLikelihoods,

    #[error("no parseable answers across probes")]
    NoParseableAnswers,

    #[error("invalid reliability thresholds: {0}")]
    InvalidThresholds(String),

    #[error("degenerate labels: need at least one error and one correct record")]
    DegenerateLabels,

    #[error("too few candidates: got {got}, need at least 2")]
    TooFewCandidates { got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UqError {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            UqError::BackendUnavailable(_)
            | UqError::RemoteJudgeUnavailable(_)
            | UqError::ScorerUnavailable(_) => 3,
            UqError::DegenerateLabels => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, UqError>;
