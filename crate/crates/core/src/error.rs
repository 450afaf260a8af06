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

    /// Malformed or unsupported header entry; `key` names the offending field.
    #[error("header error at key `{key}`: {msg}")]
    Header { key: String, msg: String },

    #[error("payload error: {0}")]
    Payload(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Non-finite loss or gradient during an optimization.
    #[error("numerical failure at iteration {iteration} ({term}): {msg}")]
    Numerical {
        iteration: usize,
        term: String,
        msg: String,
    },

    #[error("optimizer error in {layer}: {msg}")]
    Optimizer { layer: String, msg: String },

    #[error("parameter file error: {0}")]
    Params(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(key: &str, msg: impl Into<String>) -> Self {
        Error::Header {
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Optimizer { .. })
    }
}
