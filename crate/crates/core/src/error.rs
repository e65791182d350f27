use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate key `{0}`")]
    Duplicate(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("scorer protocol violation: {0}")]
    Protocol(String),

    #[error("score out of range for tile `{tile_id}`: {value}")]
    ScoreRange { tile_id: String, value: f64 },

    #[error("scorer for `{classifier}` finished with {} unscored tiles (first: {})",
        unscored.len(), unscored.first().map(String::as_str).unwrap_or("-"))]
    Incomplete {
        classifier: String,
        unscored: Vec<String>,
    },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the command line: 1 validation, 2 runtime, 3 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_)
            | Error::Invalid(_)
            | Error::UnknownLabel(_)
            | Error::Duplicate(_)
            | Error::Parse { .. } => 1,
            Error::Protocol(_) | Error::ScoreRange { .. } | Error::Incomplete { .. } => 3,
            _ => 2,
        }
    }
}
