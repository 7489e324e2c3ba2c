//! Approximate k-NN by NN-Descent: start from random neighbor lists and
//! repeatedly test neighbors of neighbors until the lists stop improving.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::knn::{by_distance_then_index, from_rows, squared_distance, NeighborGraph};

const MAX_ITERATIONS: usize = 30;
/// Stop once fewer than this fraction of the `n·k` entries change in a round.
const CONVERGENCE_FRACTION: f64 = 0.001;

pub(crate) fn nn_descent(x: &Array2<f32>, k: usize, seed: u64) -> NeighborGraph {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = |i: usize, j: usize| squared_distance(x.row(i), x.row(j));

    let mut lists: Vec<Vec<(f64, usize)>> = (0..n)
        .map(|i| {
            let mut row: Vec<(f64, usize)> = rand::seq::index::sample(&mut rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .map(|j| (dist(i, j), j))
                .collect();
            row.sort_unstable_by(by_distance_then_index);
            row
        })
        .collect();

    for _ in 0..MAX_ITERATIONS {
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, row) in lists.iter().enumerate() {
            for &(_, j) in row {
                reverse[j].push(i);
            }
        }
        for r in reverse.iter_mut() {
            if r.len() > k {
                r.shuffle(&mut rng);
                r.truncate(k);
            }
        }
        let neighborhood = |i: usize| lists[i].iter().map(|&(_, j)| j).chain(reverse[i].iter().copied());

        let updated: Vec<(Vec<(f64, usize)>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let current = &lists[i];
                let mut cand: Vec<usize> = neighborhood(i)
                    .flat_map(|u| neighborhood(u).chain(std::iter::once(u)))
                    .filter(|&c| c != i && !current.iter().any(|&(_, j)| j == c))
                    .collect();
                cand.sort_unstable();
                cand.dedup();
                let mut merged: Vec<(f64, usize)> = current.clone();
                merged.extend(cand.into_iter().map(|c| (dist(i, c), c)));
                merged.sort_unstable_by(by_distance_then_index);
                merged.truncate(k);
                let changes = merged
                    .iter()
                    .filter(|&&(_, j)| !current.iter().any(|&(_, c)| c == j))
                    .count();
                (merged, changes)
            })
            .collect();

        let mut changes = 0;
        lists = updated
            .into_iter()
            .map(|(row, c)| {
                changes += c;
                row
            })
            .collect();
        if (changes as f64) <= CONVERGENCE_FRACTION * (n * k) as f64 {
            break;
        }
    }
    from_rows(n, k, lists, false)
}
