//! Fitting the low-dimensional similarity curve `Ψ(x) = 1 / (1 + a·x^{2b})`.

use crate::error::{Error, Result};

const SAMPLES: usize = 300;
const MAX_STEPS: usize = 500;
/// Residual RMS reached at the default `min_dist = 0.1`, `spread = 1`.
pub const DEFAULT_FIT_MAX_RMS: f64 = 0.02;

pub fn psi(x: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * x.powf(2.0 * b))
}

/// The curve `Ψ` approximates: flat at 1 up to `min_dist`, then exponential decay.
pub fn target_curve(x: f64, min_dist: f64, spread: f64) -> f64 {
    if x <= min_dist {
        1.0
    } else {
        (-(x - min_dist) / spread).exp()
    }
}

/// `SAMPLES` evenly spaced points on `[0, 3·spread]`, endpoints included.
pub fn sample_points(spread: f64) -> Vec<f64> {
    let hi = 3.0 * spread;
    (0..SAMPLES).map(|i| hi * i as f64 / (SAMPLES - 1) as f64).collect()
}

pub fn fit_rms(a: f64, b: f64, min_dist: f64, spread: f64) -> f64 {
    let xs = sample_points(spread);
    let sse: f64 = xs
        .iter()
        .map(|&x| (psi(x, a, b) - target_curve(x, min_dist, spread)).powi(2))
        .sum();
    (sse / xs.len() as f64).sqrt()
}

/// Residuals and their Jacobian columns `(∂r/∂a, ∂r/∂b)`.
fn residuals(xs: &[f64], ys: &[f64], a: f64, b: f64) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut r = Vec::with_capacity(xs.len());
    let mut jac = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        if x == 0.0 {
            r.push(1.0 - y);
            jac.push((0.0, 0.0));
            continue;
        }
        let t = x.powf(2.0 * b);
        let denom = 1.0 + a * t;
        let psi = 1.0 / denom;
        r.push(psi - y);
        let dpsi_dt = -psi * psi;
        jac.push((dpsi_dt * t, dpsi_dt * a * t * 2.0 * x.ln()));
    }
    (r, jac)
}

/// Least-squares `(a, b)` by Levenberg–Marquardt from `(1, 1)`.
pub fn fit_curve(min_dist: f64, spread: f64) -> Result<(f64, f64)> {
    if !(min_dist > 0.0 && min_dist < spread) {
        return Err(Error::Config(format!(
            "curve fit needs 0 < min_dist < spread, got min_dist = {min_dist}, spread = {spread}"
        )));
    }
    let xs = sample_points(spread);
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();
    let cost = |a: f64, b: f64| residuals(&xs, &ys, a, b).0.iter().map(|v| v * v).sum::<f64>();

    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut current = cost(a, b);
    let mut converged = false;
    for _ in 0..MAX_STEPS {
        let (r, jac) = residuals(&xs, &ys, a, b);
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&ri, &(da, db)) in r.iter().zip(&jac) {
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * ri;
            gb += db * ri;
        }
        let (haa, hbb) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
        let det = haa * hbb - jab * jab;
        if det == 0.0 || !det.is_finite() {
            lambda *= 10.0;
            continue;
        }
        let step_a = -(hbb * ga - jab * gb) / det;
        let step_b = -(haa * gb - jab * ga) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let trial = if na > 0.0 && nb > 0.0 { cost(na, nb) } else { f64::INFINITY };
        if trial < current {
            let improvement = current - trial;
            a = na;
            b = nb;
            current = trial;
            lambda = (lambda / 10.0).max(1e-12);
            if improvement <= 1e-14 * current.max(1e-300)
                || (step_a.abs() <= 1e-12 * a && step_b.abs() <= 1e-12 * b)
            {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                converged = true;
                break;
            }
        }
    }
    let rms = (current / xs.len() as f64).sqrt();
    if !converged || !a.is_finite() || !b.is_finite() {
        return Err(Error::Fit(format!(
            "curve fit for min_dist = {min_dist}, spread = {spread} did not converge (a = {a}, b = {b}, rms = {rms})"
        )));
    }
    Ok((a, b))
}
