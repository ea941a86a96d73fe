use std::path::PathBuf;

/// Errors raised by file handling and the command-line driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] arbor_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed input file; `offset` is the byte position of the problem.
    #[error("{path}: format error at byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    /// Checksum mismatch or truncated payload.
    #[error("{path}: corrupt file: {message}")]
    Corrupt { path: PathBuf, message: String },
    /// Well-formed container whose contents do not describe a valid model.
    #[error("invalid model file: {0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        use arbor_core::Error as C;
        match self {
            Error::Usage(_) | Error::Core(C::Argument(_)) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::Corrupt { .. } | Error::Invalid(_) => 4,
            Error::Core(C::Shape(_)) => 5,
            Error::Core(C::Domain(_)) => 6,
            Error::Core(C::Numeric(_)) => 7,
            Error::Core(C::Capacity(_)) => 8,
        }
    }
}
