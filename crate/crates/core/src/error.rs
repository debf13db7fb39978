//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("key error: {0}")]
    Key(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
