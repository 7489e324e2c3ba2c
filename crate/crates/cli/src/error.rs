use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} failed for {layer}: {source}")]
    Stage {
        stage: &'static str,
        layer: String,
        #[source]
        source: layertour_core::Error,
    },
    #[error(transparent)]
    Core(#[from] layertour_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid bundle:\n  {}", .0.join("\n  "))]
    InvalidBundle(Vec<String>),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PipelineError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str, layer: impl Into<String>) -> impl FnOnce(layertour_core::Error) -> Self {
        let layer = layer.into();
        move |source| PipelineError::Stage { stage, layer, source }
    }
}
