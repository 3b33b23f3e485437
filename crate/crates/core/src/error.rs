use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped into coarse classes by [`Error::class`]; the CLI maps
/// each class onto a distinct process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("position error: {0}")]
    Position(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Format(_) | Error::Corrupt(_) | Error::Validation(_) => ErrorClass::Format,
            Error::Config(_) | Error::Schema(_) | Error::Selection(_) => ErrorClass::Config,
            Error::Input(_)
            | Error::Position(_)
            | Error::Precondition(_)
            | Error::Query(_)
            | Error::Split(_)
            | Error::Data(_) => ErrorClass::Data,
            Error::Internal(_) => ErrorClass::Internal,
        }
    }

    /// Process exit code for this error: 3 I/O, 4 format, 5 config, 6 data.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Io => 3,
            ErrorClass::Format => 4,
            ErrorClass::Config => 5,
            ErrorClass::Data => 6,
            ErrorClass::Internal => 1,
        }
    }
}
