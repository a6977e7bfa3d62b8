use thiserror::Error;

use crate::solver::SubstepStats;

#[derive(Debug, Error)]
pub enum DlraError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("integration failed at t = {t}: {reason} ({stats:?})")]
    Integration {
        t: f64,
        reason: String,
        stats: SubstepStats,
    },

    #[error("truncation policy violated: {0}")]
    Policy(String),

    #[error("projected-factor cache used with a different basis ({0})")]
    StaleCache(&'static str),

    #[error("projected-factor caching refused: {0}")]
    CacheRefused(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DlraError>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    got: (usize, usize),
) -> DlraError {
    DlraError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: format!("{}x{}", got.0, got.1),
    }
}
