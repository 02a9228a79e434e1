use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate triangle at index {index}")]
    DegenerateTriangle { index: usize },

    #[error("degenerate segment at index {index}")]
    DegenerateSegment { index: usize },

    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite {field} at point {index}")]
    NonFiniteField { field: String, index: usize },

    #[error("schema mismatch: missing {missing:?}")]
    Schema { missing: Vec<String> },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, sample {sample}")]
    Diverged { epoch: usize, sample: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
