use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LadError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("{path}: line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("unknown {what}: {value}")]
    Unknown { what: &'static str, value: String },

    #[error("refusing to overwrite {}", .0.display())]
    Exists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl LadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LadError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        LadError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LadError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
