//! Error type for the dataset pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("parameter error: {field}: {detail}")]
    Parameter { field: &'static str, detail: String },

    #[error("value error: {0}")]
    Value(String),

    #[error("sample `{id}` skipped: {reason}")]
    Degenerate { id: String, reason: String },

    #[error("ingestion error at line {line}: {detail}")]
    Ingest { line: usize, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, DatagenError>;

impl DatagenError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DatagenError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn parameter(field: &'static str, detail: impl Into<String>) -> Self {
        DatagenError::Parameter {
            field,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        DatagenError::Io {
            path: path.into(),
            source,
        }
    }
}
