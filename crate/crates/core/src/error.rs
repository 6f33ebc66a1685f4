use std::path::PathBuf;

/// Error type shared across the crate.
///
/// Variants are grouped by where they surface so the CLI can map them onto
/// stable exit codes: configuration problems, data/IO problems, and numeric
/// failures during optimization.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },

    #[error("episode sampling failed: {0}")]
    EpisodeSampling(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric failure in {context}: {reason}")]
    Numeric { context: String, reason: String },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::MalformedFile { .. }
            | Error::CorruptRecord { .. }
            | Error::EpisodeSampling(_)
            | Error::Data(_)
            | Error::Io { .. } => 2,
            Error::Numeric { .. } => 3,
            Error::Protocol(_) | Error::ShapeMismatch(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
