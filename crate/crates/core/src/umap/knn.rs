//! k-nearest-neighbor graphs under the Euclidean metric.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use super::nndescent::nn_descent;
use crate::error::{Error, Result};
use crate::preprocess::ActivationMatrix;

/// `n×k` neighbor lists, each row ascending by distance (ties by index).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub n: usize,
    pub k: usize,
    pub indices: Array2<usize>,
    pub distances: Array2<f64>,
    pub exact: bool,
}

impl NeighborGraph {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.n {
            return Err(Error::Config(format!("need 1 ≤ k < n, got k = {} with n = {}", self.k, self.n)));
        }
        if self.indices.dim() != (self.n, self.k) || self.distances.dim() != (self.n, self.k) {
            return Err(Error::Shape("neighbor arrays must be n×k".into()));
        }
        for i in 0..self.n {
            let row = self.indices.row(i);
            if row.iter().any(|&j| j == i || j >= self.n) {
                return Err(Error::Validation(format!("row {i} has a self-loop or out-of-range index")));
            }
            let d = self.distances.row(i);
            if d.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} has an invalid distance")));
            }
            if d.windows(2).into_iter().any(|w| w[0] > w[1]) {
                return Err(Error::Validation(format!("row {i} distances are not ascending")));
            }
        }
        Ok(())
    }

    /// Fraction of `(i, j)` neighbor entries shared with `reference`.
    pub fn recall_against(&self, reference: &NeighborGraph) -> f64 {
        let mut hits = 0usize;
        for i in 0..self.n {
            let truth = reference.indices.row(i);
            hits += self.indices.row(i).iter().filter(|j| truth.iter().any(|t| t == *j)).count();
        }
        hits as f64 / (self.n * self.k) as f64
    }
}

pub(crate) fn squared_distance(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Orders candidates by distance, then index.
pub(crate) fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub(crate) fn from_rows(n: usize, k: usize, rows: Vec<Vec<(f64, usize)>>, exact: bool) -> NeighborGraph {
    let mut indices = Array2::zeros((n, k));
    let mut distances = Array2::zeros((n, k));
    for (i, row) in rows.into_iter().enumerate() {
        for (slot, (d2, j)) in row.into_iter().enumerate() {
            indices[[i, slot]] = j;
            distances[[i, slot]] = d2.sqrt();
        }
    }
    NeighborGraph {
        n,
        k,
        indices,
        distances,
        exact,
    }
}

fn exact_knn(x: &Array2<f32>, k: usize) -> NeighborGraph {
    let n = x.nrows();
    let rows: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(xi, x.row(j)), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, by_distance_then_index);
            cand.truncate(k);
            cand.sort_unstable_by(by_distance_then_index);
            cand
        })
        .collect();
    from_rows(n, k, rows, true)
}

/// Builds the `k`-NN graph of the rows of `x`, by brute force when `exact`
/// and by NN-Descent otherwise.
pub fn knn_graph(x: &ActivationMatrix, k: usize, exact: bool, seed: u64) -> Result<NeighborGraph> {
    let n = x.n();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("need 1 ≤ k < n, got k = {k} with n = {n}")));
    }
    if exact {
        Ok(exact_knn(&x.values, k))
    } else {
        Ok(nn_descent(&x.values, k, seed))
    }
}
