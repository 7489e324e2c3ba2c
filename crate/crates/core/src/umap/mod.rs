//! Multi-dimensional UMAP: neighbor graph, fuzzy simplicial set, SGD layout
//! and the cross-entropy loss used to compare embedding dimensions.

pub mod curve;
pub mod fuzzy;
pub mod knn;
pub mod layout;
mod nndescent;
pub mod spectral;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use curve::{fit_curve, psi};
pub use fuzzy::{fuzzy_graph, FuzzyGraph};
pub use knn::{knn_graph, NeighborGraph};
pub use layout::{edge_loss, LayoutParams};

use crate::error::{Error, Result};
use crate::preprocess::ActivationMatrix;
use crate::store::{write_array, ActivationTensor};

/// Embedding dimension used for layer comparisons.
pub const DEFAULT_EMBEDDING_DIM: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub d: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    /// Curve parameters; fitted from `min_dist` and `spread` when absent.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// 500 for `n ≤ 10000`, otherwise 200, when absent.
    pub n_epochs: Option<usize>,
    pub negative_samples: usize,
    pub initial_lr: f64,
    pub seed: u64,
    /// Brute-force neighbors; NN-Descent otherwise.
    pub exact_knn: bool,
    /// Lock-free multi-threaded SGD. Results are not bit-reproducible.
    pub parallel: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            d: DEFAULT_EMBEDDING_DIM,
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            a: None,
            b: None,
            n_epochs: None,
            negative_samples: 5,
            initial_lr: 1.0,
            seed: 0,
            exact_knn: true,
            parallel: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn with_dim(d: usize) -> Self {
        EmbeddingConfig {
            d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!("embedding dimension must be at least 2, got {}", self.d)));
        }
        if self.n_neighbors < 2 {
            return Err(Error::Config(format!("n_neighbors must be at least 2, got {}", self.n_neighbors)));
        }
        if !(self.min_dist > 0.0 && self.min_dist < self.spread) {
            return Err(Error::Config(format!(
                "need 0 < min_dist < spread, got {} and {}",
                self.min_dist, self.spread
            )));
        }
        for (name, v) in [("a", self.a), ("b", self.b)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.a.is_some() != self.b.is_some() {
            return Err(Error::Config("a and b must be given together".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.n_epochs == Some(0) {
            return Err(Error::Config("n_epochs must be positive".into()));
        }
        Ok(())
    }

    /// `(a, b)`, fitting them when not set.
    pub fn curve(&self) -> Result<(f64, f64)> {
        match (self.a, self.b) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => fit_curve(self.min_dist, self.spread),
        }
    }

    pub fn epochs_for(&self, n: usize) -> usize {
        self.n_epochs.unwrap_or(if n <= 10_000 { 500 } else { 200 })
    }

    fn layout_params(&self, n: usize) -> Result<LayoutParams> {
        self.validate()?;
        let (a, b) = self.curve()?;
        Ok(LayoutParams {
            d: self.d,
            a,
            b,
            n_epochs: self.epochs_for(n),
            negative_samples: self.negative_samples,
            initial_lr: self.initial_lr,
            seed: self.seed,
            parallel: self.parallel,
        })
    }
}

/// Low-dimensional coordinates of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub layer_id: String,
    pub coords: Array2<f32>,
    pub final_loss: f64,
    pub seed: u64,
}

impl EmbeddingMatrix {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn d(&self) -> usize {
        self.coords.ncols()
    }

    /// Little-endian f32, row-major.
    pub fn to_blob(&self) -> Vec<u8> {
        self.coords.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_blob(layer_id: impl Into<String>, bytes: &[u8], n: usize, d: usize) -> Result<Self> {
        if bytes.len() != n * d * 4 {
            return Err(Error::Format(format!(
                "embedding blob has {} bytes, expected {}",
                bytes.len(),
                n * d * 4
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddingMatrix {
            layer_id: layer_id.into(),
            coords: Array2::from_shape_vec((n, d), values).expect("length checked"),
            final_loss: f64::NAN,
            seed: 0,
        })
    }

    /// Subtracts the column means.
    pub fn centered(&self) -> EmbeddingMatrix {
        let m = crate::preprocess::center_columns(&ActivationMatrix::new(self.layer_id.clone(), self.coords.clone()));
        EmbeddingMatrix {
            coords: m.values,
            ..self.clone()
        }
    }

    pub fn sidecar(&self, config: &EmbeddingConfig) -> EmbeddingSidecar {
        EmbeddingSidecar {
            layer_id: self.layer_id.clone(),
            d: self.d(),
            seed: self.seed,
            final_loss: self.final_loss,
            config: config.clone(),
        }
    }

    /// Writes `<path>` as `.npy` and a `.json` sidecar beside it.
    pub fn save(&self, config: &EmbeddingConfig, path: &Path) -> Result<()> {
        let tensor = ActivationTensor::new(
            self.layer_id.clone(),
            vec![self.n(), self.d()],
            self.coords.iter().copied().collect(),
        )?;
        write_array(&tensor, path)?;
        let sidecar_path = path.with_extension("json");
        let json = serde_json::to_vec_pretty(&self.sidecar(config)).expect("sidecar serializes");
        std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub layer_id: String,
    pub d: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub config: EmbeddingConfig,
}

/// Lays out the fuzzy graph in `cfg.d` dimensions.
pub fn optimize_embedding(g: &FuzzyGraph, cfg: &EmbeddingConfig) -> Result<EmbeddingMatrix> {
    let params = cfg.layout_params(g.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = layout::initial_layout(g, cfg.d, &mut rng);
    let y = layout::optimize_layout(g, init, &params, &mut rng)?;
    let coords = y.mapv(|v| v as f32);
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimize { epoch: params.n_epochs });
    }
    let final_loss = edge_loss(g, &coords, params.a, params.b);
    Ok(EmbeddingMatrix {
        layer_id: String::new(),
        coords,
        final_loss,
        seed: cfg.seed,
    })
}

/// Mean per-edge cross entropy of `e` against `g`.
pub fn embedding_loss(g: &FuzzyGraph, e: &EmbeddingMatrix, cfg: &EmbeddingConfig) -> Result<f64> {
    if g.n != e.n() {
        return Err(Error::Shape(format!("graph has {} points, embedding has {}", g.n, e.n())));
    }
    let (a, b) = cfg.curve()?;
    Ok(edge_loss(g, &e.coords, a, b))
}

/// Fuzzy graph of `x` under the configuration's neighbor settings.
pub fn build_graph(x: &ActivationMatrix, cfg: &EmbeddingConfig) -> Result<FuzzyGraph> {
    cfg.validate()?;
    if x.n() < 2 {
        return Err(Error::Config(format!("cannot embed {} examples", x.n())));
    }
    let k = cfg.n_neighbors.min(x.n() - 1);
    fuzzy_graph(&knn_graph(x, k, cfg.exact_knn, cfg.seed)?)
}

/// Graph construction plus layout, labelled with the matrix's layer id.
pub fn embed(x: &ActivationMatrix, cfg: &EmbeddingConfig) -> Result<EmbeddingMatrix> {
    let g = build_graph(x, cfg)?;
    let mut e = optimize_embedding(&g, cfg)?;
    e.layer_id = x.layer_id.clone();
    Ok(e)
}

/// Mean final loss per dimension over `seeds_per_dim` runs on one shared graph.
/// Run `s` uses seed `cfg.seed + s`.
pub fn dimension_sweep(
    x: &ActivationMatrix,
    dims: &[usize],
    cfg: &EmbeddingConfig,
    seeds_per_dim: usize,
) -> Result<Vec<(usize, f64)>> {
    if dims.is_empty() {
        return Err(Error::Config("dimension sweep needs at least one dimension".into()));
    }
    if dims.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep dimensions must be ascending".into()));
    }
    if seeds_per_dim == 0 {
        return Err(Error::Config("seeds_per_dim must be positive".into()));
    }
    let g = build_graph(x, cfg)?;
    let (a, b) = cfg.curve()?;
    let runs: Vec<(usize, u64)> = dims
        .iter()
        .flat_map(|&d| (0..seeds_per_dim as u64).map(move |s| (d, s)))
        .collect();
    let losses: Vec<f64> = runs
        .par_iter()
        .map(|&(d, s)| {
            let run = EmbeddingConfig {
                d,
                a: Some(a),
                b: Some(b),
                seed: cfg.seed.wrapping_add(s),
                ..cfg.clone()
            };
            optimize_embedding(&g, &run).map(|e| e.final_loss)
        })
        .collect::<Result<_>>()?;
    Ok(dims
        .iter()
        .zip(losses.chunks(seeds_per_dim))
        .map(|(&d, l)| (d, l.iter().sum::<f64>() / l.len() as f64))
        .collect())
}
