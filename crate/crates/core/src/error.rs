use std::path::PathBuf;

use crate::scene::Diagnostic;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record {record}: {message}")]
    Malformed {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("no point-cloud frames in {0}")]
    NoFrames(PathBuf),

    #[error("invariant violation: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invariant(Vec<Diagnostic>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires output of stage `{needs}`, which is missing")]
    MissingDependency { stage: String, needs: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("external completer failed: {0}")]
    Completer(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, record: impl ToString, message: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            record: record.to_string(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
