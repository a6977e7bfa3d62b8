use std::path::PathBuf;

use dlra::DlraError;
use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Numerical(#[from] DlraError),

    /// A run diverged or failed; `diagnostics` lists the records written before the failure.
    #[error("{variant} r={rank} h={h:e} failed: {source}\n{diagnostics}")]
    Run { variant: String, rank: usize, h: f64, diagnostics: String, source: DlraError },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("csv {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config { line: 0, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration or input errors, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Input(_) => 2,
            HarnessError::Numerical(e) | HarnessError::Run { source: e, .. } => match e {
                DlraError::InvalidInput(_) | DlraError::Parse { .. } | DlraError::Policy(_) => 2,
                DlraError::Io(_) => 1,
                _ => 3,
            },
            HarnessError::Io { .. } | HarnessError::Csv { .. } => 1,
        }
    }
}
