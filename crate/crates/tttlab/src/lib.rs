//! Experiment runner around `tttlab-core`: config files, parallel trials,
//! figure sweeps, verification suites and CSV/JSON records.

pub mod config;
pub mod figures;
pub mod parallel;
pub mod records;
pub mod verify;

use std::fmt;

/// Errors surfaced by the runner, each with a process exit code.
#[derive(Debug)]
pub enum AppError {
    /// Bad flags, malformed config, unwritable output.
    Usage(String),
    Regime(String),
    /// One or more verification checks failed.
    Verification(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Verification(_) => 2,
            AppError::Regime(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "error: {m}"),
            AppError::Regime(m) => write!(f, "unsupported regime: {m}"),
            AppError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<tttlab_core::Error> for AppError {
    fn from(e: tttlab_core::Error) -> Self {
        match e {
            tttlab_core::Error::UnsupportedRegime(m) => AppError::Regime(m),
            other => AppError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Usage(e.to_string())
    }
}
