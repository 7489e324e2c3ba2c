//! Torus-method Grand Tour: a smooth sequence of orthogonal matrices built
//! from per-plane Givens rotations at fixed speeds, projection of data onto
//! the first 2 or 3 rotated axes, and direct-manipulation steering.

use ndarray::{Array2, ArrayBase, Axis, Data, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_schmidt_columns, orthogonality_error, to_f64};

pub const MIN_PLANE_SPEED: f64 = 0.03;
pub const MAX_PLANE_SPEED: f64 = 0.3;
/// Re-orthonormalize at least this often.
pub const REORTHO_INTERVAL: u64 = 1000;
/// ... or as soon as `‖gtᵀgt − I‖_∞` exceeds this.
pub const REORTHO_DRIFT: f64 = 1e-6;
/// Centroids shorter than this have no usable direction.
pub const MIN_CENTROID_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TourStateJson", try_from = "TourStateJson")]
pub struct TourState {
    pub p: usize,
    pub gt: Array2<f64>,
    /// Angular velocity per plane `(i, j)`, `i < j`, lexicographic.
    pub plane_speeds: Vec<f64>,
    pub t: f64,
    pub seed: u64,
    pub steps_since_reortho: u64,
}

/// Wire form: `gt` flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TourStateJson {
    p: usize,
    seed: u64,
    t: f64,
    gt: Vec<f64>,
    plane_speeds: Vec<f64>,
    #[serde(default)]
    steps_since_reortho: u64,
}

impl From<TourState> for TourStateJson {
    fn from(s: TourState) -> Self {
        TourStateJson {
            p: s.p,
            seed: s.seed,
            t: s.t,
            gt: s.gt.iter().copied().collect(),
            plane_speeds: s.plane_speeds,
            steps_since_reortho: s.steps_since_reortho,
        }
    }
}

impl TryFrom<TourStateJson> for TourState {
    type Error = Error;

    fn try_from(j: TourStateJson) -> Result<Self> {
        if j.p < 2 {
            return Err(Error::Config(format!("tour dimension must be at least 2, got {}", j.p)));
        }
        if j.plane_speeds.len() != plane_count(j.p) {
            return Err(Error::Format(format!(
                "expected {} plane speeds for p = {}, got {}",
                plane_count(j.p),
                j.p,
                j.plane_speeds.len()
            )));
        }
        let gt = Array2::from_shape_vec((j.p, j.p), j.gt)
            .map_err(|_| Error::Format(format!("gt must hold {} values", j.p * j.p)))?;
        if gt.iter().any(|v| !v.is_finite()) || orthogonality_error(&gt.view()) > 1e-5 {
            return Err(Error::Format("gt is not an orthogonal matrix".into()));
        }
        Ok(TourState {
            p: j.p,
            gt,
            plane_speeds: j.plane_speeds,
            t: j.t,
            seed: j.seed,
            steps_since_reortho: j.steps_since_reortho,
        })
    }
}

pub fn plane_count(p: usize) -> usize {
    p * (p - 1) / 2
}

/// Planes `(i, j)` with `i < j` in lexicographic order.
pub fn planes(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |i| (i + 1..p).map(move |j| (i, j)))
}

pub fn new_tour(p: usize, seed: u64) -> Result<TourState> {
    if p < 2 {
        return Err(Error::Config(format!("tour dimension must be at least 2, got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane_speeds = (0..plane_count(p))
        .map(|_| rng.random_range(MIN_PLANE_SPEED..=MAX_PLANE_SPEED))
        .collect();
    Ok(TourState {
        p,
        gt: Array2::eye(p),
        plane_speeds,
        t: 0.0,
        seed,
        steps_since_reortho: 0,
    })
}

/// Right-multiplies `gt` by the Givens rotation in plane `(i, j)`, whose
/// entries are `G[i][i] = G[j][j] = cos θ`, `G[i][j] = sin θ`, `G[j][i] = −sin θ`.
fn rotate_plane(gt: &mut Array2<f64>, i: usize, j: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    for r in 0..gt.nrows() {
        let (a, b) = (gt[[r, i]], gt[[r, j]]);
        gt[[r, i]] = c * a - s * b;
        gt[[r, j]] = s * a + c * b;
    }
}

/// Advances the tour by `dt` seconds.
pub fn step(state: &TourState, dt: f64) -> Result<TourState> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("time step must be finite and non-negative, got {dt}")));
    }
    let mut next = state.clone();
    if dt == 0.0 {
        return Ok(next);
    }
    for ((i, j), &omega) in planes(state.p).zip(&state.plane_speeds) {
        rotate_plane(&mut next.gt, i, j, omega * dt);
    }
    next.t += dt;
    next.steps_since_reortho += 1;
    if next.steps_since_reortho >= REORTHO_INTERVAL || orthogonality_error(&next.gt.view()) > REORTHO_DRIFT {
        gram_schmidt_columns(&mut next.gt);
        next.steps_since_reortho = 0;
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Array2<f64>,
    pub source_dim: usize,
    pub tour_time: f64,
}

/// First `k` columns of `x · gt`.
pub fn project<S, A>(state: &TourState, x: &ArrayBase<S, Ix2>, k: usize) -> Result<Projection>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    if k != 2 && k != 3 {
        return Err(Error::Config(format!("projection dimension must be 2 or 3, got {k}")));
    }
    if k > state.p {
        return Err(Error::Config(format!("cannot project {}-D data to {k}-D", state.p)));
    }
    if x.ncols() != state.p {
        return Err(Error::Shape(format!(
            "data has {} columns, tour has p = {}",
            x.ncols(),
            state.p
        )));
    }
    let coords = to_f64(x).dot(&state.gt.slice(ndarray::s![.., ..k]));
    Ok(Projection {
        coords,
        source_dim: state.p,
        tour_time: state.t,
    })
}

/// Steers the tour so the selection's projected centroid follows `drag`.
///
/// With `c` the selection centroid, adds `dx·c/‖c‖²` to column 0 and
/// `dy·c/‖c‖²` to column 1 of `gt`, then re-orthonormalizes columns in order.
pub fn direct_manipulate<S, A>(
    state: &TourState,
    x: &ArrayBase<S, Ix2>,
    selected: &[usize],
    drag: (f64, f64),
) -> Result<TourState>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    if selected.is_empty() {
        return Err(Error::Manipulation("selection is empty".into()));
    }
    if x.ncols() != state.p {
        return Err(Error::Shape(format!(
            "data has {} columns, tour has p = {}",
            x.ncols(),
            state.p
        )));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= x.nrows()) {
        return Err(Error::Manipulation(format!(
            "selected row {bad} out of range for {} rows",
            x.nrows()
        )));
    }
    let rows = to_f64(&x.select(Axis(0), selected));
    let centroid = rows.mean_axis(Axis(0)).expect("selection is non-empty");
    let norm = centroid.dot(&centroid).sqrt();
    if !(norm > MIN_CENTROID_NORM) {
        return Err(Error::Manipulation(format!(
            "selection centroid norm {norm:e} is too small to define a drag direction"
        )));
    }
    let (dx, dy) = drag;
    if !dx.is_finite() || !dy.is_finite() {
        return Err(Error::Manipulation("drag must be finite".into()));
    }
    let mut next = state.clone();
    if dx == 0.0 && dy == 0.0 {
        return Ok(next);
    }
    let direction = centroid / (norm * norm);
    next.gt.column_mut(0).scaled_add(dx, &direction);
    next.gt.column_mut(1).scaled_add(dy, &direction);
    gram_schmidt_columns(&mut next.gt);
    next.steps_since_reortho = 0;
    Ok(next)
}

/// Reference cases for checking other implementations of `project`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenVectors {
    pub tolerance: f64,
    pub cases: Vec<GoldenCase>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub state: TourState,
    pub k: usize,
    /// `n×p`, row-major.
    pub points: Vec<Vec<f64>>,
    /// `n×k`, row-major.
    pub expected: Vec<Vec<f64>>,
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Deterministic golden cases: tours of several dimensions advanced for a
/// range of frame counts, some steered, projected to 2-D and 3-D.
pub fn golden_vectors(seed: u64) -> Result<GoldenVectors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (p, frames, steer) in [(2, 30, false), (3, 120, false), (5, 600, true), (15, 0, false), (15, 240, false), (15, 1800, true)] {
        let mut state = new_tour(p, seed.wrapping_add(p as u64))?;
        let points = Array2::from_shape_fn((12, p), |_| rng.random_range(-3.0..3.0));
        for frame in 0..frames {
            state = step(&state, 1.0 / 60.0)?;
            if steer && frame % 100 == 50 {
                state = direct_manipulate(&state, &points, &[0, 1, 2], (0.05, -0.03))?;
            }
        }
        for k in [2, 3] {
            if k > p {
                continue;
            }
            let proj = project(&state, &points, k)?;
            cases.push(GoldenCase {
                name: format!("p{p}_frames{frames}{}_k{k}", if steer { "_steered" } else { "" }),
                state: state.clone(),
                k,
                points: rows_of(&points),
                expected: rows_of(&proj.coords),
            });
        }
    }
    Ok(GoldenVectors {
        tolerance: 1e-4,
        cases,
    })
}
