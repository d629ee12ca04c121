use std::path::PathBuf;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: unsupported schema version {found} (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("summary grammar error at byte {offset}: {message}")]
    Grammar { offset: usize, message: String },

    #[error("trajectory of student {student} too short: need {needed} interactions, have {available}")]
    TrajectoryTooShort {
        student: u64,
        needed: usize,
        available: usize,
    },

    #[error("question {0} not found in bank")]
    UnknownQuestion(u64),

    #[error("student {0} not found")]
    UnknownStudent(u64),

    #[error("prediction/truth mismatch: {0}")]
    Mismatch(String),

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("external trainer required: {0}")]
    ExternalTrainerRequired(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or arguments.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidInput(_))
    }
}
