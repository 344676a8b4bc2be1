use std::io;
use std::path::Path;

use reach_intent::Error;

/// Failures grouped by the process exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    /// Classifies a library error that arose while reading `path`.
    pub fn reading(path: &Path, err: Error) -> Self {
        match err {
            Error::Io(e) if e.kind() == io::ErrorKind::NotFound => {
                CliError::Data(format!("{}: file not found", path.display()))
            }
            Error::Io(e) => CliError::Data(format!("{}: {e}", path.display())),
            other => CliError::Data(format!("{}: {other}", path.display())),
        }
    }

    pub fn writing(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("cannot write {}: {err}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Parameter(_) => CliError::Usage(err.to_string()),
            Error::Load(_) | Error::Json(_) | Error::CorruptModel(_) | Error::StaleCache { .. } => {
                CliError::Data(err.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
