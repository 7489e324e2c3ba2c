//! The fuzzy simplicial set: per-point calibrated neighbor weights,
//! symmetrized by probabilistic union.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::knn::NeighborGraph;
use crate::error::{Error, Result};

const BANDWIDTH_ITERATIONS: usize = 64;

/// Symmetric weighted graph. `edges` holds both `(i, j, w)` and `(j, i, w)`,
/// sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Rows whose bandwidth target was unreachable; their `sigma` is 1.
    pub degenerate: Vec<bool>,
}

impl FuzzyGraph {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut lookup = BTreeMap::new();
        for &(i, j, w) in &self.edges {
            if i >= self.n || j >= self.n || i == j {
                return Err(Error::Validation(format!("invalid edge ({i}, {j})")));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Validation(format!("edge ({i}, {j}) has weight {w} outside (0, 1]")));
            }
            lookup.insert((i, j), w);
        }
        for (&(i, j), &w) in &lookup {
            if lookup.get(&(j, i)) != Some(&w) {
                return Err(Error::Validation(format!("edge ({i}, {j}) has no symmetric partner")));
            }
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("bandwidths must be positive".into()));
        }
        Ok(())
    }
}

pub fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    (-(d - rho).max(0.0) / sigma).exp()
}

fn membership_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances.iter().map(|&d| membership(d, rho, sigma)).sum()
}

/// Calibrates `(ρ, σ)` for one ascending distance row so the memberships sum
/// to `log₂(k)`. Returns `σ = 1` and a degenerate flag when no bandwidth in
/// `[1e-6·mean, 1e3·mean]` reaches the target.
pub fn smooth_knn(distances: &[f64]) -> (f64, f64, bool) {
    let k = distances.len();
    let rho = distances[0];
    let target = (k as f64).log2();
    let mean = distances.iter().sum::<f64>() / k as f64;
    if !(mean > 0.0) {
        return (rho, 1.0, true);
    }
    let (mut lo, mut hi) = (1e-6 * mean, 1e3 * mean);
    if membership_sum(distances, rho, lo) > target || membership_sum(distances, rho, hi) < target {
        return (rho, 1.0, true);
    }
    for _ in 0..BANDWIDTH_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if membership_sum(distances, rho, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (rho, 0.5 * (lo + hi), false)
}

/// `a + b − a·b`, evaluated so that a unit input gives exactly 1.
pub fn probabilistic_union(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + lo * (1.0 - hi)
}

/// Directed memberships, then `w = w₁ + w₂ − w₁·w₂` per unordered pair.
pub fn fuzzy_graph(nn: &NeighborGraph) -> Result<FuzzyGraph> {
    nn.validate()?;
    let calibration: Vec<(f64, f64, bool)> = (0..nn.n)
        .into_par_iter()
        .map(|i| smooth_knn(nn.distances.row(i).as_slice().expect("standard layout")))
        .collect();

    let mut pairs: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, &(rho, sigma, _)) in calibration.iter().enumerate() {
        for (&j, &d) in nn.indices.row(i).iter().zip(nn.distances.row(i).iter()) {
            let w = membership(d, rho, sigma);
            if w <= 0.0 {
                continue;
            }
            let entry = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = w;
            } else {
                entry.1 = w;
            }
        }
    }

    let mut edges = Vec::with_capacity(2 * pairs.len());
    for (&(i, j), &(a, b)) in &pairs {
        let w = probabilistic_union(a, b);
        edges.push((i, j, w));
        edges.push((j, i, w));
    }
    edges.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));

    let (rho, (sigma, degenerate)) = calibration.into_iter().map(|(r, s, d)| (r, (s, d))).unzip();
    Ok(FuzzyGraph {
        n: nn.n,
        edges,
        rho,
        sigma,
        degenerate,
    })
}
