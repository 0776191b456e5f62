use thiserror::Error;

/// Library-wide error type. Variants map 1:1 onto CLI exit codes so that
/// scripted callers can distinguish bad configs from bad data from numeric
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI. 0 is success; each failure category
    /// gets a stable nonzero code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } => 3,
            Error::Data(_) => 4,
            Error::Topology(_) => 4,
            Error::Shape(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}
