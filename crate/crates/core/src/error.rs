use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{count} observation(s) lie outside the grid snap tolerance, first at record {first_record} ({x}, {y})")]
    OutOfGrid {
        count: usize,
        first_record: usize,
        x: f64,
        y: f64,
        records: Vec<usize>,
    },

    #[error("matrix not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("singular normal-equations system in {0}")]
    Singular(&'static str),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("field image for layer {0} is already thresholded")]
    AlreadyThresholded(u8),

    #[error("field image for layer {0} is not thresholded")]
    NotThresholded(u8),

    #[error("malformed grid file {path}: {message}")]
    GridFormat { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: u8) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }
}
