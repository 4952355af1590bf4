use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Model,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("schema violation at {field}: {msg}")]
    Schema { field: String, msg: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("missing image file {0}")]
    MissingImage(PathBuf),
    #[error("box {0} touches the panorama border")]
    EdgeBox(String),
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("image store is empty")]
    EmptyImageStore,
    #[error("invalid split: {0}")]
    Split(String),
    #[error("synthetic generation failed: {0}")]
    Synth(String),
    #[error("phrase extraction failed: {0}")]
    Phrase(String),
    #[error("parser backend unavailable: {0}")]
    ParserUnavailable(String),
    #[error("backbone error: {0}")]
    Backbone(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Backbone(_) | Error::Shape(_) | Error::Checkpoint(_) | Error::ParserUnavailable(_) => {
                ErrorClass::Model
            }
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
