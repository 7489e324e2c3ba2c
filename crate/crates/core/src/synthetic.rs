//! Synthetic datasets: a Klein bottle immersed in 4-D and stacks of
//! nonlinearly related "layers" built from clustered base data.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ActivationMatrix;

/// The 4-D Klein bottle point at parameters `(u, v)`.
pub fn klein_bottle_point(u: f64, v: f64, big_r: f64, r: f64) -> [f64; 4] {
    let ring = big_r + r * v.cos();
    [
        ring * u.cos(),
        ring * u.sin(),
        r * v.sin() * (u / 2.0).cos(),
        r * v.sin() * (u / 2.0).sin(),
    ]
}

/// `n` Klein-bottle points with `u, v` uniform on `[0, 2π)` and isotropic
/// Gaussian noise. Also returns the sampled `(u, v)` per row.
pub fn klein_bottle_with_params(
    n: usize,
    big_r: f64,
    r: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<(ActivationMatrix, Vec<(f64, f64)>)> {
    if !(big_r > r && r > 0.0) {
        return Err(Error::Config(format!("Klein bottle needs R > r > 0, got R = {big_r}, r = {r}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::<f32>::zeros((n, 4));
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.random_range(0.0..TAU);
        let v = rng.random_range(0.0..TAU);
        let point = klein_bottle_point(u, v, big_r, r);
        for (c, &x) in point.iter().enumerate() {
            let noise = if noise_sd > 0.0 { noise_sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            values[[i, c]] = (x + noise) as f32;
        }
        params.push((u, v));
    }
    Ok((ActivationMatrix::new("klein", values), params))
}

pub fn klein_bottle(n: usize, big_r: f64, r: f64, noise_sd: f64, seed: u64) -> Result<ActivationMatrix> {
    klein_bottle_with_params(n, big_r, r, noise_sd, seed).map(|(m, _)| m)
}

/// Parameters of a synthetic layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerStackConfig {
    pub n: usize,
    pub p: usize,
    pub layers: usize,
    /// Gaussian clusters in the base data.
    pub clusters: usize,
    /// Spread of cluster centers relative to the within-cluster spread.
    pub separation: f64,
    /// Weight of the random part of each layer's mixing matrix `I + mixing·G/√p`.
    pub mixing: f64,
    pub seed: u64,
    /// Separate seed for the layer weights. Without it the weights continue
    /// the base-data random stream.
    pub weight_seed: Option<u64>,
}

impl Default for LayerStackConfig {
    fn default() -> Self {
        LayerStackConfig {
            n: 1000,
            p: 64,
            layers: 8,
            clusters: 10,
            separation: 1.0,
            mixing: 1.5,
            seed: 0,
            weight_seed: None,
        }
    }
}

/// Clustered base data followed by `layers` layers, each `tanh` of the
/// previous layer times a random matrix. Layer ids are `layer0`, `layer1`, …
pub fn layer_stack(cfg: &LayerStackConfig) -> Result<Vec<ActivationMatrix>> {
    if cfg.n < 2 || cfg.p == 0 || cfg.layers == 0 || cfg.clusters == 0 {
        return Err(Error::Config(format!("degenerate layer stack configuration {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers = Array2::from_shape_fn((cfg.clusters, cfg.p), |_| cfg.separation * normal.sample(&mut rng));
    let mut current = Array2::from_shape_fn((cfg.n, cfg.p), |(i, j)| centers[[i % cfg.clusters, j]] + normal.sample(&mut rng));
    if let Some(s) = cfg.weight_seed {
        rng = ChaCha8Rng::seed_from_u64(s);
    }
    let scale = cfg.mixing / (cfg.p as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w = Array2::from_shape_fn((cfg.p, cfg.p), |(i, j)| {
            let g = scale * normal.sample(&mut rng);
            if i == j {
                1.0 + g
            } else {
                g
            }
        });
        current = current.dot(&w).mapv(f64::tanh);
        out.push(ActivationMatrix::new(format!("layer{l}"), current.mapv(|v| v as f32)));
    }
    Ok(out)
}

/// Class label of each row of a layer stack.
pub fn layer_stack_labels(cfg: &LayerStackConfig) -> Vec<i64> {
    (0..cfg.n).map(|i| (i % cfg.clusters) as i64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn klein_formula_values() {
        assert_eq!(klein_bottle_point(0.0, 0.0, 2.0, 1.0), [3.0, 0.0, 0.0, 0.0]);
        let p = klein_bottle_point(0.0, PI, 2.0, 1.0);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] == 0.0 && p[2].abs() < 1e-15 && p[3] == 0.0);
    }

    #[test]
    fn klein_samples_satisfy_ring_identity() {
        let (m, params) = klein_bottle_with_params(500, 2.0, 1.0, 0.0, 3).unwrap();
        assert_eq!(m.values.dim(), (500, 4));
        for (row, &(_, v)) in m.values.rows().into_iter().zip(&params) {
            let lhs = (row[0] as f64).powi(2) + (row[1] as f64).powi(2);
            let rhs = (2.0 + v.cos()).powi(2);
            assert!((lhs - rhs).abs() < 1e-5);
        }
        assert_eq!(klein_bottle(10, 2.0, 1.0, 0.1, 1).unwrap(), klein_bottle(10, 2.0, 1.0, 0.1, 1).unwrap());
        assert!(klein_bottle(10, 1.0, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn layer_stack_shapes() {
        let cfg = LayerStackConfig { n: 50, p: 6, layers: 3, ..Default::default() };
        let layers = layer_stack(&cfg).unwrap();
        assert_eq!(layers.len(), 3);
        assert!(layers.iter().all(|l| l.values.dim() == (50, 6)));
        assert!(layers.iter().flat_map(|l| l.values.iter()).all(|v| v.abs() <= 1.0));
        assert_eq!(layers[2].layer_id, "layer2");
        assert_eq!(layer_stack(&cfg).unwrap(), layers);
        assert_eq!(layer_stack_labels(&cfg)[13], 3);
    }

    #[test]
    fn weight_seed_keeps_base_data() {
        let a = LayerStackConfig { n: 40, p: 5, layers: 2, weight_seed: Some(1), ..Default::default() };
        let b = LayerStackConfig { weight_seed: Some(2), ..a.clone() };
        let (la, lb) = (layer_stack(&a).unwrap(), layer_stack(&b).unwrap());
        assert_ne!(la[0], lb[0]);
        let c = LayerStackConfig { layers: 1, p: 5, n: 40, mixing: 0.0, weight_seed: Some(9), ..Default::default() };
        let d = LayerStackConfig { weight_seed: Some(10), ..c.clone() };
        assert_eq!(layer_stack(&c).unwrap(), layer_stack(&d).unwrap());
    }
}
