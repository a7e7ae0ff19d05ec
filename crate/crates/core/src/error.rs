use std::path::PathBuf;

/// Errors raised by every layer of the pipeline.
///
/// The variants map onto process exit codes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration values (schedule endpoints, bin counts, empty datasets).
    #[error("configuration error: {0}")]
    Config(String),

    /// A function was called with arguments that violate its contract.
    #[error("argument error: {0}")]
    Argument(String),

    /// Dataset or sidecar files are missing, unpaired or unreadable.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),

    /// A non-finite value appeared where training or sampling cannot continue.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 = usage, 3 = data, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Ingestion(_) | Error::Io { .. } | Error::Image { .. } | Error::Serde(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Argument(msg()))
    }
}
