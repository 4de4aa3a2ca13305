use thiserror::Error;

use crate::data::TaskFamily;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] wemoe_core::Error),

    #[error("{family} supports at most {max} classes, asked for {classes}")]
    TooManyClasses {
        family: TaskFamily,
        classes: usize,
        max: usize,
    },

    #[error("invalid task spec: {0}")]
    Spec(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// True when the failure comes from numerical breakdown in the core.
    pub fn is_numerical(&self) -> bool {
        matches!(self, BenchError::Core(e) if e.is_numerical())
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
