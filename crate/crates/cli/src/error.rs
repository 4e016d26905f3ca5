use std::io;
use std::path::{Path, PathBuf};

use lvqa_core::probing::EvaluateError;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Backend(_) => 3,
            CliError::Usage(_) => 4,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        CliError::Io { path: path.as_ref().to_owned(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<EvaluateError> for CliError {
    fn from(err: EvaluateError) -> Self {
        match err {
            EvaluateError::Image { path, source } => {
                CliError::Io { path, source: io::Error::new(io::ErrorKind::InvalidData, source.to_string()) }
            }
            EvaluateError::Io(e) => CliError::Io { path: PathBuf::from("<views>"), source: e },
            e if e.is_backend() => CliError::Backend(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
