//! Layout optimization by stochastic gradient descent on the fuzzy-set
//! cross entropy, and the loss evaluator.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayBase, Data, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::curve::psi;
use super::fuzzy::FuzzyGraph;
use super::spectral::spectral_layout;
use crate::error::{Error, Result};

/// Per-component gradient clip.
pub const GRADIENT_CLIP: f64 = 4.0;
/// Squared-distance floor in the repulsive gradient.
pub const REPULSION_FLOOR: f64 = 0.001;
/// Largest graph initialized spectrally.
pub const SPECTRAL_INIT_MAX_N: usize = 4000;
/// Bounds applied to `q` inside the loss.
pub const LOSS_CLAMP: f64 = 1e-7;

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn difference(yi: &[f64], yj: &[f64]) -> Vec<f64> {
    yi.iter().zip(yj).map(|(a, b)| a - b).collect()
}

/// `−log Ψ(‖yᵢ − yⱼ‖) = log(1 + a·d^{2b})`.
pub fn attractive_loss(yi: &[f64], yj: &[f64], a: f64, b: f64) -> f64 {
    let d2 = squared_norm(&difference(yi, yj));
    (a * d2.powf(b)).ln_1p()
}

/// `−log(1 − Ψ(‖yᵢ − yₖ‖))`.
pub fn repulsive_loss(yi: &[f64], yk: &[f64], a: f64, b: f64) -> f64 {
    let t = a * squared_norm(&difference(yi, yk)).powf(b);
    t.ln_1p() - t.ln()
}

/// Scalar `c` with `∇_{yᵢ} attractive_loss = c·(yᵢ − yⱼ)`; zero at `d = 0`.
pub fn attractive_coefficient(d2: f64, a: f64, b: f64) -> f64 {
    if d2 <= 0.0 {
        return 0.0;
    }
    2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b))
}

/// Scalar `c` with `∇_{yᵢ} repulsive_loss = c·(yᵢ − yₖ)` wherever
/// `d² ≥ REPULSION_FLOOR`; below the floor `d²` is replaced by the floor.
pub fn repulsive_coefficient(d2: f64, a: f64, b: f64) -> f64 {
    -2.0 * b / (d2.max(REPULSION_FLOOR) * (1.0 + a * d2.powf(b)))
}

pub fn attractive_gradient(yi: &[f64], yj: &[f64], a: f64, b: f64) -> Vec<f64> {
    let diff = difference(yi, yj);
    let c = attractive_coefficient(squared_norm(&diff), a, b);
    diff.into_iter().map(|v| c * v).collect()
}

pub fn repulsive_gradient(yi: &[f64], yk: &[f64], a: f64, b: f64) -> Vec<f64> {
    let diff = difference(yi, yk);
    let c = repulsive_coefficient(squared_norm(&diff), a, b);
    diff.into_iter().map(|v| c * v).collect()
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

/// Mean binary cross entropy over the stored edges between the graph weights
/// and `q = Ψ(‖yᵢ − yⱼ‖)`, with `q` clamped to `[1e-7, 1 − 1e-7]`.
pub fn edge_loss<S, A>(g: &FuzzyGraph, coords: &ArrayBase<S, Ix2>, a: f64, b: f64) -> f64
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    if g.edges.is_empty() {
        return 0.0;
    }
    let total: f64 = g
        .edges
        .iter()
        .map(|&(i, j, w)| {
            let d2: f64 = coords
                .row(i)
                .iter()
                .zip(coords.row(j).iter())
                .map(|(&x, &y)| {
                    let t = x.into() - y.into();
                    t * t
                })
                .sum();
            let q = psi(d2.sqrt(), a, b).clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
            -(w * q.ln() + (1.0 - w) * (1.0 - q).ln())
        })
        .sum();
    total / g.edges.len() as f64
}

/// Optimizer settings resolved from an embedding configuration.
#[derive(Debug, Clone, Copy)]
pub struct LayoutParams {
    pub d: usize,
    pub a: f64,
    pub b: f64,
    pub n_epochs: usize,
    pub negative_samples: usize,
    pub initial_lr: f64,
    pub seed: u64,
    pub parallel: bool,
}

/// Initial coordinates: spectral for connected graphs with `n ≤ 4000`,
/// otherwise uniform in `[−10, 10]^d`.
pub fn initial_layout(g: &FuzzyGraph, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if g.n <= SPECTRAL_INIT_MAX_N {
        if let Some(y) = spectral_layout(g, d, rng) {
            return y;
        }
    }
    Array2::from_shape_fn((g.n, d), |_| rng.random_range(-10.0..10.0))
}

/// Epochs between samples of each edge (`max_w / w`), or `None` for edges too
/// light to be sampled within `n_epochs`.
fn epochs_per_sample(g: &FuzzyGraph, n_epochs: usize) -> Vec<Option<f64>> {
    let max_w = g.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    g.edges
        .iter()
        .map(|&(_, _, w)| {
            let samples = n_epochs as f64 * w / max_w;
            (samples >= 1.0).then(|| n_epochs as f64 / samples)
        })
        .collect()
}

struct Schedule {
    edges: Vec<(usize, usize)>,
    epochs_per_sample: Vec<f64>,
    epochs_per_negative: Vec<f64>,
    next_sample: Vec<f64>,
    next_negative: Vec<f64>,
}

impl Schedule {
    fn new(g: &FuzzyGraph, n_epochs: usize, negative_samples: usize) -> Self {
        let mut s = Schedule {
            edges: Vec::new(),
            epochs_per_sample: Vec::new(),
            epochs_per_negative: Vec::new(),
            next_sample: Vec::new(),
            next_negative: Vec::new(),
        };
        for (&(i, j, _), eps) in g.edges.iter().zip(epochs_per_sample(g, n_epochs)) {
            if let Some(eps) = eps {
                s.edges.push((i, j));
                s.epochs_per_sample.push(eps);
                s.next_sample.push(eps);
                let neg = if negative_samples == 0 {
                    f64::INFINITY
                } else {
                    eps / negative_samples as f64
                };
                s.epochs_per_negative.push(neg);
                s.next_negative.push(neg);
            }
        }
        s
    }

    /// Number of negative samples owed to edge `e` at `epoch`, advancing its clock.
    fn take_negatives(&mut self, e: usize, epoch: f64) -> usize {
        let per = self.epochs_per_negative[e];
        if !per.is_finite() {
            return 0;
        }
        let owed = ((epoch - self.next_negative[e]) / per).floor().max(0.0) as usize;
        self.next_negative[e] += owed as f64 * per;
        owed
    }
}

/// Coordinate storage shared by the sequential and lock-free parallel paths.
trait Coords {
    fn get(&self, i: usize, c: usize) -> f64;
    fn add(&self, i: usize, c: usize, v: f64);
}

struct AtomicCoords {
    d: usize,
    bits: Vec<AtomicU64>,
}

impl Coords for AtomicCoords {
    fn get(&self, i: usize, c: usize) -> f64 {
        f64::from_bits(self.bits[i * self.d + c].load(Ordering::Relaxed))
    }

    fn add(&self, i: usize, c: usize, v: f64) {
        let slot = &self.bits[i * self.d + c];
        let cur = f64::from_bits(slot.load(Ordering::Relaxed));
        slot.store((cur + v).to_bits(), Ordering::Relaxed);
    }
}

fn attract<C: Coords>(y: &C, i: usize, j: usize, d: usize, p: &LayoutParams, lr: f64, buf: &mut [f64]) {
    let mut d2 = 0.0;
    for c in 0..d {
        buf[c] = y.get(i, c) - y.get(j, c);
        d2 += buf[c] * buf[c];
    }
    let coef = attractive_coefficient(d2, p.a, p.b);
    for c in 0..d {
        let g = clip(coef * buf[c]) * lr;
        y.add(i, c, -g);
        y.add(j, c, g);
    }
}

fn repel<C: Coords>(y: &C, i: usize, k: usize, d: usize, p: &LayoutParams, lr: f64, buf: &mut [f64]) {
    let mut d2 = 0.0;
    for c in 0..d {
        buf[c] = y.get(i, c) - y.get(k, c);
        d2 += buf[c] * buf[c];
    }
    if d2 > 0.0 {
        let coef = repulsive_coefficient(d2, p.a, p.b);
        for c in 0..d {
            y.add(i, c, -clip(coef * buf[c]) * lr);
        }
    } else {
        for c in 0..d {
            y.add(i, c, GRADIENT_CLIP * lr);
        }
    }
}

/// Applies the sampled updates of one edge. Negative samples equal to either
/// endpoint are skipped.
#[allow(clippy::too_many_arguments)]
fn process_edge<C: Coords, R: Rng>(
    y: &C,
    (i, j): (usize, usize),
    negatives: usize,
    n: usize,
    p: &LayoutParams,
    lr: f64,
    rng: &mut R,
    buf: &mut [f64],
) {
    attract(y, i, j, p.d, p, lr, buf);
    for _ in 0..negatives {
        let k = rng.random_range(0..n);
        if k == i || k == j {
            continue;
        }
        repel(y, i, k, p.d, p, lr, buf);
    }
}

struct PlainCoords {
    d: usize,
    values: Vec<Cell<f64>>,
}

impl Coords for PlainCoords {
    fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.d + c].get()
    }

    fn add(&self, i: usize, c: usize, v: f64) {
        let slot = &self.values[i * self.d + c];
        slot.set(slot.get() + v);
    }
}

fn check_finite<C: Coords>(y: &C, n: usize, d: usize, epoch: usize) -> Result<()> {
    for i in 0..n {
        for c in 0..d {
            if !y.get(i, c).is_finite() {
                return Err(Error::Optimize { epoch });
            }
        }
    }
    Ok(())
}

/// Runs the SGD layout from `init`, mutating nothing else.
pub fn optimize_layout(g: &FuzzyGraph, init: Array2<f64>, params: &LayoutParams, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let (n, d) = init.dim();
    let mut schedule = Schedule::new(g, params.n_epochs, params.negative_samples);
    let values: Vec<f64> = init.into_iter().collect();

    if params.parallel && rayon::current_num_threads() > 1 {
        let y = AtomicCoords {
            d,
            bits: values.into_iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        };
        let shard = schedule.edges.len().div_ceil(rayon::current_num_threads() * 4).max(1);
        for epoch in 0..params.n_epochs {
            let lr = params.initial_lr * (1.0 - epoch as f64 / params.n_epochs as f64);
            let e_now = epoch as f64;
            let mut due = Vec::new();
            for e in 0..schedule.edges.len() {
                if schedule.next_sample[e] <= e_now {
                    schedule.next_sample[e] += schedule.epochs_per_sample[e];
                    due.push((e, schedule.take_negatives(e, e_now)));
                }
            }
            let epoch_seed = rng.random::<u64>();
            due.par_chunks(shard).enumerate().for_each(|(chunk, items)| {
                let mut local = ChaCha8Rng::seed_from_u64(epoch_seed ^ (chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut buf = vec![0.0; d];
                for &(e, negs) in items {
                    process_edge(&y, schedule.edges[e], negs, n, params, lr, &mut local, &mut buf);
                }
            });
            check_finite(&y, n, d, epoch)?;
        }
        let flat: Vec<f64> = y.bits.iter().map(|b| f64::from_bits(b.load(Ordering::Relaxed))).collect();
        return Ok(Array2::from_shape_vec((n, d), flat).expect("n·d values"));
    }

    let y = PlainCoords {
        d,
        values: values.into_iter().map(Cell::new).collect(),
    };
    let mut buf = vec![0.0; d];
    for epoch in 0..params.n_epochs {
        let lr = params.initial_lr * (1.0 - epoch as f64 / params.n_epochs as f64);
        let e_now = epoch as f64;
        for e in 0..schedule.edges.len() {
            if schedule.next_sample[e] > e_now {
                continue;
            }
            schedule.next_sample[e] += schedule.epochs_per_sample[e];
            let negs = schedule.take_negatives(e, e_now);
            process_edge(&y, schedule.edges[e], negs, n, params, lr, rng, &mut buf);
        }
        check_finite(&y, n, d, epoch)?;
    }
    let flat: Vec<f64> = y.values.into_iter().map(Cell::into_inner).collect();
    Ok(Array2::from_shape_vec((n, d), flat).expect("n·d values"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const A: f64 = 1.577;
    const B: f64 = 0.895;

    #[test]
    fn coefficients_match_closed_forms() {
        let yi = [0.3, -0.2, 1.0];
        let yj = [0.1, 0.4, 0.2];
        let g = attractive_gradient(&yi, &yj, A, B);
        let h = 1e-6;
        for c in 0..3 {
            let (mut up, mut dn) = (yi, yi);
            up[c] += h;
            dn[c] -= h;
            let fd = (attractive_loss(&up, &yj, A, B) - attractive_loss(&dn, &yj, A, B)) / (2.0 * h);
            assert_abs_diff_eq!(g[c], fd, epsilon = 1e-7);
            let r = repulsive_gradient(&yi, &yj, A, B);
            let fd = (repulsive_loss(&up, &yj, A, B) - repulsive_loss(&dn, &yj, A, B)) / (2.0 * h);
            assert_abs_diff_eq!(r[c], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn loss_hand_values() {
        // Ψ(d) = 1/2 exactly when a·d^{2b} = 1, i.e. a = 1 at d = 1.
        let g = FuzzyGraph {
            n: 2,
            edges: vec![(0, 1, 1.0), (1, 0, 1.0)],
            rho: vec![1.0; 2],
            sigma: vec![1.0; 2],
            degenerate: vec![false; 2],
        };
        let y = ndarray::array![[0.0, 0.0], [1.0, 0.0]];
        assert_abs_diff_eq!(edge_loss(&g, &y, 1.0, 1.0), 2f64.ln(), epsilon = 1e-12);
        let mut half = g.clone();
        half.edges = vec![(0, 1, 0.5), (1, 0, 0.5)];
        assert_abs_diff_eq!(edge_loss(&half, &y, 1.0, 1.0), 2f64.ln(), epsilon = 1e-12);
        let z = ndarray::array![[0.0, 0.0], [0.0, 0.0]];
        let l = edge_loss(&g, &z, A, B);
        assert!(l > 0.0 && l < 2e-7, "{l}");
    }

    #[test]
    fn schedule_drops_light_edges() {
        let g = FuzzyGraph {
            n: 3,
            edges: vec![(0, 1, 1.0), (0, 2, 0.001), (1, 0, 1.0), (2, 0, 0.001)],
            rho: vec![0.0; 3],
            sigma: vec![1.0; 3],
            degenerate: vec![false; 3],
        };
        let eps = epochs_per_sample(&g, 200);
        assert_eq!(eps[0], Some(1.0));
        assert_eq!(eps[1], None);
        let s = Schedule::new(&g, 200, 5);
        assert_eq!(s.edges, vec![(0, 1), (1, 0)]);
        assert_abs_diff_eq!(s.epochs_per_negative[0], 0.2);
    }
}
