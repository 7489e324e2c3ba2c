use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed NPY container: bad magic, unsupported version, bad header, length mismatch.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported dtype {0:?}: only little/big-endian f4 and f8 are accepted")]
    Dtype(String),

    /// Non-finite value found while reading; `index` is the flat row-major position.
    #[error("non-finite value {value} at flat index {index}")]
    Value { index: usize, value: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("manifest error (layer {layer_id:?}): {message}")]
    Manifest {
        layer_id: Option<String>,
        message: String,
    },

    #[error("pooling error: {0}")]
    Pool(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("curve fit did not converge: {0}")]
    Fit(String),

    #[error("layout optimization produced non-finite coordinates at epoch {epoch}")]
    Optimize { epoch: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("direct manipulation undefined: {0}")]
    Manipulation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(layer_id: Option<&str>, message: impl Into<String>) -> Self {
        Error::Manifest {
            layer_id: layer_id.map(str::to_owned),
            message: message.into(),
        }
    }
}
