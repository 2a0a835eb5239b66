use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    /// The target-language interpreter could not be launched. This is a
    /// configuration problem, never a property of the candidate code.
    #[error("interpreter unavailable ({program}): {message}")]
    InterpreterMissing { program: String, message: String },

    #[error("sandbox failure: {0}")]
    Sandbox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("reward: {0}")]
    Reward(String),

    #[error("policy: {0}")]
    Policy(String),

    #[error("policy transport: {0}")]
    Transport(String),

    #[error("critic: {0}")]
    Critic(String),

    #[error("canonicalization failed: {0}")]
    Canonicalize(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("conversion: {0}")]
    Convert(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
