use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ntkt_core::Error as CoreError;

/// Everything that can end a command, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing input file")]
    Missing { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    /// A config file that does not match the schema (unknown key, wrong type).
    #[error("config {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Integrity(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit statuses: 0 ok, 2 usage, 3 data integrity, 4 numeric failure, 5 io.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const INTEGRITY: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const IO: u8 = 5;
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::Missing { path };
        }
        CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                CoreError::Argument(_) | CoreError::State(_) => exit::USAGE,
                CoreError::Integrity(_) | CoreError::Parse { .. } | CoreError::Grammar { .. } => exit::INTEGRITY,
                CoreError::Numeric(_) | CoreError::Undefined(_) => exit::NUMERIC,
            },
            CliError::Io { .. } | CliError::Missing { .. } => exit::IO,
            CliError::Format { .. } | CliError::Schema { .. } | CliError::Integrity(_) => exit::INTEGRITY,
            CliError::Usage(_) => exit::USAGE,
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

macro_rules! usage {
    ($($arg:tt)*) => {
        return Err($crate::error::CliError::Usage(format!($($arg)*)))
    };
}
pub(crate) use usage;
