use std::path::PathBuf;

/// Errors raised anywhere in the matting stack.
///
/// The variant doubles as the failure category reported by the CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 2,
            Error::Config(_) => 3,
            Error::Format(_) | Error::Io { .. } => 4,
            Error::Checkpoint(_) => 5,
            Error::Numerical(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! arg_err {
    ($($t:tt)*) => { $crate::error::Error::Argument(format!($($t)*)) };
}
pub(crate) use arg_err;
