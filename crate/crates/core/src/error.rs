use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("singular timestep {t}: alpha_bar is zero")]
    SingularTimestep { t: usize },

    #[error("cannot take a reverse step from t = 0")]
    CannotStep,

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid world model: {0}")]
    InvalidWorld(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("invalid evaluator artifact: {0}")]
    Artifact(String),

    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output directory {0} already holds a run; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used on the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension",
            Error::TimestepOutOfRange { .. } => "timestep",
            Error::SingularTimestep { .. } => "singular",
            Error::CannotStep => "cannot-step",
            Error::InvalidSchedule(_) => "schedule",
            Error::InvalidWorld(_) => "world",
            Error::Contract(_) => "contract",
            Error::Training { .. } => "training",
            Error::Artifact(_) => "artifact",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::OutputExists(_) => "output-exists",
            Error::ChecksumMismatch(_) => "checksum",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
