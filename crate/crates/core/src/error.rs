use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("data configuration {version}: {message}")]
    Composition { version: String, message: String },

    #[error("protocol {protocol}: {message}")]
    ProtocolCount { protocol: String, message: String },

    #[error("unresolved embedding id `{0}`")]
    Unresolved(String),

    #[error("training diverged at step {step} ({})", last_good_note(*.last_good))]
    Diverged { step: u64, last_good: Option<u64> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

fn last_good_note(last_good: Option<u64>) -> String {
    match last_good {
        Some(s) => format!("last good step {s}"),
        None => "no good step".into(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
