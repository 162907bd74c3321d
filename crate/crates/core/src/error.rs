use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CvseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CvseError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient vocabulary: bucket {bucket} needs {needed} tokens, found {available}")]
    InsufficientVocabulary {
        bucket: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("insufficient batch: {0} pairs, at least 2 are needed for in-batch negatives")]
    InsufficientBatch(usize),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("data integrity: missing ids {0:?}")]
    DataIntegrity(Vec<String>),

    #[error("config error at key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CvseError {
    /// Stable machine-readable code, printed by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            CvseError::Shape { .. } => "E_SHAPE",
            CvseError::Parameter(_) => "E_PARAM",
            CvseError::Degenerate(_) => "E_DEGENERATE",
            CvseError::InsufficientVocabulary { .. } => "E_VOCAB",
            CvseError::InsufficientBatch(_) => "E_BATCH",
            CvseError::Parse { .. } => "E_PARSE",
            CvseError::Format { .. } => "E_FORMAT",
            CvseError::DataIntegrity(_) => "E_DATA",
            CvseError::Config { .. } => "E_CONFIG",
            CvseError::Io { .. } => "E_IO",
            CvseError::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        CvseError::Shape { op, lhs, rhs }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvseError::Io {
            path: path.into(),
            source,
        }
    }
}
