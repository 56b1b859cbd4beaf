use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{pair} is not an integer ratio ({numerator} / {denominator})")]
    NonIntegerRatio {
        pair: &'static str,
        numerator: f64,
        denominator: f64,
    },
    #[error("{field} must be positive and finite, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("condition set is empty")]
    EmptyConditionSet,
    #[error("duplicate condition id {0:?}")]
    DuplicateCondition(String),
    #[error("condition {id:?}: {reason}")]
    InvalidCondition { id: String, reason: String },
    #[error("unknown prompt variant {0:?} (expected baseline or a1..a7)")]
    UnknownVariant(String),
    #[error("repetitions and parallelism must be at least 1")]
    InvalidExperiment,
}

impl ConfigError {
    pub(crate) fn condition(id: &str, reason: impl Into<String>) -> Self {
        ConfigError::InvalidCondition {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("plan is empty")]
    Empty,
    #[error("plan element {index} is not finite")]
    NonFinite { index: usize },
    #[error("plan element {index} = {value} is outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("plan has {actual} elements, expected {expected}")]
    WrongLength { expected: usize, actual: usize },
    #[error("cursor {cursor} beyond plan length {len}")]
    CursorOutOfRange { cursor: usize, len: usize },
}
