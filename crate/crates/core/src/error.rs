use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FareError {
    /// A configuration value violates a documented invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data is malformed or out of range.
    #[error("input error: {0}")]
    Input(String),

    /// The data does not support the requested protocol step.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    /// A pipeline stage was run before the stage that produces its input.
    #[error("stage `{stage}` requires artifact {} (run stage `{producer}` first)", path.display())]
    MissingArtifact {
        stage: String,
        producer: String,
        path: PathBuf,
    },

    #[error("artifact {} was produced by config {found}, expected {expected}", path.display())]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FareError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FareError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        FareError::Parse {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// Prefix the message of an input/protocol error with context such as a prompt id.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            FareError::Input(m) => FareError::Input(format!("{ctx}: {m}")),
            FareError::Protocol(m) => FareError::Protocol(format!("{ctx}: {m}")),
            FareError::Config(m) => FareError::Config(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T, E = FareError> = std::result::Result<T, E>;
