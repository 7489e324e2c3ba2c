//! Pipeline configuration, loadable from JSON and overridable from the CLI.

use std::path::{Path, PathBuf};

use layertour_core::similarity::IndexKind;
use layertour_core::umap::EmbeddingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// One or two dataset manifests (one per model).
    pub manifests: Vec<PathBuf>,
    pub embed: EmbeddingConfig,
    /// Feature budget for pooling 4-D activations.
    pub target_dims: usize,
    pub similarity_kinds: Vec<IndexKind>,
    /// Row fraction used to estimate each Procrustes transform.
    pub subsample_fraction: f64,
    pub out_dir: PathBuf,
    /// Shared seed; required.
    pub seed: Option<u64>,
    /// Align every within-model layer pair, not only consecutive ones.
    pub all_within_pairs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifests: Vec::new(),
            embed: EmbeddingConfig::default(),
            target_dims: layertour_core::preprocess::DEFAULT_TARGET_DIMS,
            similarity_kinds: vec![IndexKind::CkaLinear, IndexKind::Procrustes],
            subsample_fraction: 1.0,
            out_dir: PathBuf::from("bundle"),
            seed: None,
            all_within_pairs: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_slice(&bytes).map_err(|e| PipelineError::json(path, e))?;
        // Relative paths are taken relative to the config file.
        if let Some(base) = path.parent() {
            for p in cfg.manifests.iter_mut().chain(std::iter::once(&mut cfg.out_dir)) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| PipelineError::Config("a seed is required (set \"seed\" or pass --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.manifests.is_empty() || self.manifests.len() > 2 {
            return Err(PipelineError::Config(format!(
                "expected 1 or 2 manifests, got {}",
                self.manifests.len()
            )));
        }
        self.seed()?;
        if self.similarity_kinds.is_empty() {
            return Err(PipelineError::Config("no similarity kinds requested".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(PipelineError::Config(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if self.target_dims == 0 {
            return Err(PipelineError::Config("target_dims must be positive".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(PipelineError::Config("output directory is empty".into()));
        }
        self.embed.validate()?;
        Ok(())
    }

    /// Embedding settings with the shared seed applied.
    pub fn embedding(&self) -> Result<EmbeddingConfig> {
        Ok(EmbeddingConfig {
            seed: self.seed()?,
            ..self.embed.clone()
        })
    }
}
