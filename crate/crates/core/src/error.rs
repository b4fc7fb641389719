use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DpmnError>;

#[derive(Debug, Error)]
pub enum DpmnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, field `{field}`: {message}")]
    Parse {
        row: usize,
        field: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DpmnError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DpmnError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DpmnError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpmnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `dpmn` binary.
    ///
    /// 2 = configuration, 3 = data (parsing, validation, checkpoint, I/O),
    /// 4 = numeric failure. Shape/index/contract errors are programming or
    /// configuration mismatches and map to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            DpmnError::Config(_)
            | DpmnError::Shape { .. }
            | DpmnError::Index { .. }
            | DpmnError::Contract(_) => 2,
            DpmnError::Parse { .. }
            | DpmnError::Validation { .. }
            | DpmnError::Integrity(_)
            | DpmnError::Io { .. } => 3,
            DpmnError::NonFinite(_) | DpmnError::GradCheck(_) => 4,
        }
    }
}
