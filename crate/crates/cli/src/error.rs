use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Core(#[from] sand::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for bad flags or configs, 2 for bad or incompatible data, 3 when
    /// training diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                sand::Error::Config(_) | sand::Error::UnknownGenerator(_) => EXIT_USAGE,
                sand::Error::NonFiniteGradient { .. } => EXIT_DIVERGED,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
