use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HmilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HmilError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("incompatible checkpoint: field `{field}` is {checkpoint} in checkpoint but {dataset} in dataset")]
    Incompatible {
        field: &'static str,
        checkpoint: String,
        dataset: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl HmilError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HmilError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        HmilError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        HmilError::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 for invalid inputs, 2 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HmilError::Numeric(_)
            | HmilError::Graph(_)
            | HmilError::Io { .. }
            | HmilError::Degenerate { .. } => 2,
            _ => 1,
        }
    }
}
