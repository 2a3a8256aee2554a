//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("goal: {0}")]
    Goal(String),

    #[error("domain: {0}")]
    Domain(String),

    #[error("{path}:{line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("backend: {0}")]
    Backend(String),

    #[error("script exhausted for tag '{0}'")]
    ScriptExhausted(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error("unknown placeholder '{{{0}}}' in template")]
    UnknownPlaceholder(String),

    #[error("config: {0}")]
    Config(String),

    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
