use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Input that parses but cannot be used (too many malformed rows, NaNs, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown {kind}: {key}")]
    Lookup { kind: &'static str, key: String },

    /// A pipeline stage was run before the stage that produces its inputs.
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
}

impl Error {
    /// Process exit code: 2 usage, 3 missing artifact, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Lookup { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Data(_) => 4,
        }
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn lookup(kind: &'static str, key: impl Into<String>) -> Self {
        Error::Lookup {
            kind,
            key: key.into(),
        }
    }
}
