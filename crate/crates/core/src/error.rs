use std::path::PathBuf;

/// Errors raised across the recommender pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("integrity check failed for {path}: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for the command-line tool: 2 for a missing
    /// prerequisite, 3 for an integrity failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Integrity { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
