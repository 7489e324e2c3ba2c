//! Spectral initialization from the leading non-trivial eigenvectors of the
//! normalized adjacency `D^{-1/2}·W·D^{-1/2}`.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::fuzzy::FuzzyGraph;
use crate::linalg::gram_schmidt_columns;

const MAX_ITERATIONS: usize = 500;
const TOLERANCE: f64 = 1e-6;

/// Number of connected components of the graph.
pub fn component_count(g: &FuzzyGraph) -> usize {
    let mut parent: Vec<usize> = (0..g.n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(i, j, _) in &g.edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    (0..g.n).filter(|&i| find(&mut parent, i) == i).count()
}

/// `out = ½(I + M)·x` with `M` the normalized adjacency. The shift makes
/// the spectrum non-negative so the dominant eigenvectors are the wanted ones.
fn shifted_apply(g: &FuzzyGraph, inv_sqrt_deg: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let mut out = x * 0.5;
    let m = x.ncols();
    for &(i, j, w) in &g.edges {
        let s = 0.5 * w * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        for c in 0..m {
            out[[i, c]] += s * x[[j, c]];
        }
    }
    out
}

/// `n×d` spectral layout scaled into `[0, 10]` per coordinate, with a little
/// seeded noise. Returns `None` for disconnected graphs.
pub fn spectral_layout<R: Rng>(g: &FuzzyGraph, d: usize, rng: &mut R) -> Option<Array2<f64>> {
    let n = g.n;
    if n <= d + 1 || g.edges.is_empty() || component_count(g) != 1 {
        return None;
    }
    let mut degree = vec![0.0f64; n];
    for &(i, _, w) in &g.edges {
        degree[i] += w;
    }
    let inv_sqrt_deg: Vec<f64> = degree.iter().map(|&v| 1.0 / v.sqrt()).collect();

    // Column 0 is pinned to the trivial eigenvector √deg.
    let m = d + 1;
    let norm = degree.iter().sum::<f64>().sqrt();
    let mut basis = Array2::from_shape_fn((n, m), |(i, c)| {
        if c == 0 {
            degree[i].sqrt() / norm
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    gram_schmidt_columns(&mut basis);
    let trivial = basis.column(0).to_owned();

    for _ in 0..MAX_ITERATIONS {
        let mut next = shifted_apply(g, &inv_sqrt_deg, &basis);
        next.column_mut(0).assign(&trivial);
        gram_schmidt_columns(&mut next);
        let change = next
            .iter()
            .zip(basis.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        basis = next;
        if change < TOLERANCE {
            break;
        }
    }

    let mut coords = basis.slice(ndarray::s![.., 1..]).to_owned();
    let max_abs = coords.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(max_abs > 0.0) || coords.iter().any(|v| !v.is_finite()) {
        return None;
    }
    coords *= 10.0 / max_abs;
    coords.mapv_inplace(|v| v + 1e-4 * rng.sample::<f64, _>(StandardNormal));
    for mut col in coords.axis_iter_mut(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            col.mapv_inplace(|v| 10.0 * (v - lo) / (hi - lo));
        }
    }
    Some(coords)
}
