use alloc::string::String;

use crate::fingerprint::Fingerprint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("vocabulary mismatch: model expects {expected}, vector built with {actual}")]
    VocabularyMismatch {
        expected: Fingerprint,
        actual: Fingerprint,
    },
    #[error("cron syntax error in `{expr}`: {reason}")]
    CronSyntax { expr: String, reason: String },
    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("patient not found: {0}")]
    PatientNotFound(String),
    #[error("order not found: {0}")]
    OrderNotFound(String),
}

pub type Result<T> = core::result::Result<T, Error>;
