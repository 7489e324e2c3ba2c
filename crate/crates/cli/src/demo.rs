//! Demo datasets written as NPY files plus a dataset manifest.

use std::path::{Path, PathBuf};

use layertour_core::preprocess::ActivationMatrix;
use layertour_core::store::{write_array, ActivationTensor, DatasetManifest, LayerEntry};
use layertour_core::synthetic::{klein_bottle, layer_stack, layer_stack_labels, LayerStackConfig};
use layertour_core::umap::EmbeddingConfig;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const DEMO_CONFIG: &str = "pipeline.json";

/// Writes `tensors` under `dir` and saves a manifest that lists them in order.
pub fn write_dataset(
    dir: &Path,
    model_name: &str,
    tensors: &[ActivationTensor],
    labels: Option<Vec<i64>>,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut layers = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = PathBuf::from(format!("{}.npy", t.layer_id));
        write_array(t, dir.join(&file))?;
        layers.push(LayerEntry {
            id: t.layer_id.clone(),
            path: file,
            shape: t.shape.clone(),
        });
    }
    let manifest = DatasetManifest {
        model_name: model_name.to_string(),
        layers,
        labels,
        label_names: None,
        example_assets: None,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join(DATASET_MANIFEST))?;
    Ok(manifest)
}

fn to_tensor(m: &ActivationMatrix, shape: Vec<usize>) -> Result<ActivationTensor> {
    let values = m.values.iter().copied().collect();
    Ok(ActivationTensor::new(m.layer_id.clone(), shape, values)?)
}

/// A single-layer dataset of `n` Klein-bottle points in 4-D.
pub fn demo_klein(out_dir: &Path, n: usize, seed: u64) -> Result<DatasetManifest> {
    let points = klein_bottle(n, 2.0, 1.0, 0.0, seed)?;
    let tensor = to_tensor(&points, vec![n, 4])?;
    write_dataset(out_dir, "klein", &[tensor], None)
}

/// Two synthetic models sharing base data and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoLayersConfig {
    pub stack: LayerStackConfig,
    /// Layer count of the second model, whose layers are stored as
    /// `(n, p/16, 4, 4)` feature maps when `p` is a multiple of 16.
    pub second_model_layers: usize,
    pub target_dims: usize,
    pub embedding_dim: usize,
}

impl Default for DemoLayersConfig {
    fn default() -> Self {
        DemoLayersConfig {
            stack: LayerStackConfig::default(),
            second_model_layers: 6,
            target_dims: 32,
            embedding_dim: 15,
        }
    }
}

/// Writes `alpha/` and `beta/` datasets plus a ready-to-run pipeline config
/// whose bundle goes to `out_dir/bundle`. Returns the config path.
pub fn demo_layers(out_dir: &Path, cfg: &DemoLayersConfig) -> Result<PathBuf> {
    let seed = cfg.stack.seed;
    let labels = layer_stack_labels(&cfg.stack);
    let n = cfg.stack.n;
    let p = cfg.stack.p;

    let alpha_cfg = LayerStackConfig {
        weight_seed: Some(seed.wrapping_mul(2).wrapping_add(1)),
        ..cfg.stack.clone()
    };
    let alpha: Vec<ActivationTensor> = layer_stack(&alpha_cfg)?
        .iter()
        .map(|m| to_tensor(m, vec![n, p]))
        .collect::<Result<_>>()?;
    write_dataset(&out_dir.join("alpha"), "alpha", &alpha, Some(labels.clone()))?;

    let beta_cfg = LayerStackConfig {
        layers: cfg.second_model_layers,
        weight_seed: Some(seed.wrapping_mul(2).wrapping_add(2)),
        ..cfg.stack.clone()
    };
    let beta_shape = if p % 16 == 0 { vec![n, p / 16, 4, 4] } else { vec![n, p] };
    let beta: Vec<ActivationTensor> = layer_stack(&beta_cfg)?
        .iter()
        .map(|m| to_tensor(m, beta_shape.clone()))
        .collect::<Result<_>>()?;
    write_dataset(&out_dir.join("beta"), "beta", &beta, Some(labels))?;

    let pipeline = PipelineConfig {
        manifests: vec![
            PathBuf::from("alpha").join(DATASET_MANIFEST),
            PathBuf::from("beta").join(DATASET_MANIFEST),
        ],
        embed: EmbeddingConfig {
            seed,
            ..EmbeddingConfig::with_dim(cfg.embedding_dim)
        },
        target_dims: cfg.target_dims,
        out_dir: PathBuf::from("bundle"),
        seed: Some(seed),
        ..PipelineConfig::default()
    };
    let path = out_dir.join(DEMO_CONFIG);
    let json = serde_json::to_vec_pretty(&pipeline).expect("config serializes");
    std::fs::write(&path, json).map_err(|e| PipelineError::io(&path, e))?;
    Ok(path)
}
