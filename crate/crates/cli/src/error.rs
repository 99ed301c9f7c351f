use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tokvla_core::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("refusing to reuse {path}: {reason}")]
    Refused { path: PathBuf, reason: String },

    #[error("run directory {0} is locked by another invocation")]
    Locked(PathBuf),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write plot {path}: {source}")]
    Plot {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use tokvla_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Core(E::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(E::NonFiniteLoss { .. }) => EXIT_DIVERGENCE,
            CliError::Core(E::Data { .. } | E::NotFound(_) | E::Io { .. } | E::CorruptStream(_)) => EXIT_DATA,
            CliError::Refused { .. } => EXIT_DATA,
            CliError::Core(_) | CliError::Locked(_) | CliError::Io { .. } | CliError::Plot { .. } => EXIT_FAILURE,
        }
    }
}
