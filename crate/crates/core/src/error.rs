use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("softmax row {row} is entirely masked")]
    DegenerateRow { row: usize },

    #[error("sequence length {len} exceeds model capacity t_max={t_max}")]
    Capacity { len: usize, t_max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("metric {metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite gradient in parameter `{param}` ({count} entries)")]
    NonFiniteGradient { param: String, count: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
