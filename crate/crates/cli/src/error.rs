use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] fedrobust::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use fedrobust::Error as E;
        match self {
            Self::Config { .. } | Self::Parse(_) => EXIT_CONFIG,
            Self::Io { .. } | Self::Checkpoint { .. } => EXIT_IO,
            Self::CheckFailed(_) => EXIT_CHECK,
            Self::Core(e) => match e {
                E::InvalidArgument { .. }
                | E::InfeasibleStepSizes(_)
                | E::InsufficientData { .. }
                | E::DimensionMismatch { .. }
                | E::TooLarge(_) => EXIT_CONFIG,
                E::BadMagic { .. }
                | E::TruncatedFile { .. }
                | E::CountMismatch { .. }
                | E::OutOfRange(_) => EXIT_IO,
                _ => EXIT_CHECK,
            },
        }
    }
}
