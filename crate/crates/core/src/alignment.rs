//! Alignment of one representation onto another: orthogonal Procrustes,
//! the CKA-induced linear map, and the SVD alignment of linearly connected
//! layers; plus linear interpolation paths for animated layer transitions.

use std::fmt;

use ndarray::{Array2, ArrayBase, Axis, Data, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross, frobenius, svd, to_f64};
use crate::similarity::{linear_cka_of, procrustes_similarity};
use crate::umap::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    Procrustes,
    Cka,
    SvdLayer,
}

impl fmt::Display for AlignmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignmentKind::Procrustes => "procrustes",
            AlignmentKind::Cka => "cka",
            AlignmentKind::SvdLayer => "svd_layer",
        })
    }
}

/// A transform registering a source representation onto a target:
/// `source · transform ≈ target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub kind: AlignmentKind,
    pub transform: Array2<f64>,
    /// Procrustes index for `procrustes`, linear CKA for `cka`, none for `svd_layer`.
    pub score: Option<f64>,
    /// Normalizer `z = ‖XᵀY‖_F` for `cka`, 1 otherwise.
    pub scale: f64,
    pub source_layer: String,
    pub target_layer: String,
    /// Transform was estimated on a row subsample.
    pub subsampled: bool,
    /// `XᵀY` was rank deficient, so the orthogonal factor is not unique.
    pub non_unique: bool,
}

/// JSON sidecar stored next to an alignment blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSidecar {
    pub kind: AlignmentKind,
    pub score: Option<f64>,
    pub scale: f64,
    pub source_layer: String,
    pub target_layer: String,
    pub subsampled: bool,
    #[serde(default)]
    pub non_unique: bool,
    pub rows: usize,
    pub cols: usize,
}

impl AlignmentMap {
    pub fn with_layers(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source_layer = source.into();
        self.target_layer = target.into();
        self
    }

    /// `√p · W` for CKA maps, so that `tr(ŴᵀŴ) = p` like an orthogonal matrix.
    pub fn scaled_transform(&self) -> Array2<f64> {
        let p = self.transform.nrows() as f64;
        &self.transform * p.sqrt()
    }

    pub fn apply<S, A>(&self, x: &ArrayBase<S, Ix2>) -> Result<Array2<f64>>
    where
        S: Data<Elem = A>,
        A: Copy + Into<f64>,
    {
        if x.ncols() != self.transform.nrows() {
            return Err(Error::Shape(format!(
                "cannot apply a {}×{} transform to {} columns",
                self.transform.nrows(),
                self.transform.ncols(),
                x.ncols()
            )));
        }
        Ok(to_f64(x).dot(&self.transform))
    }

    pub fn sidecar(&self) -> AlignmentSidecar {
        AlignmentSidecar {
            kind: self.kind,
            score: self.score,
            scale: self.scale,
            source_layer: self.source_layer.clone(),
            target_layer: self.target_layer.clone(),
            subsampled: self.subsampled,
            non_unique: self.non_unique,
            rows: self.transform.nrows(),
            cols: self.transform.ncols(),
        }
    }

    /// Little-endian f32, row-major.
    pub fn to_blob(&self) -> Vec<u8> {
        self.transform
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn from_blob(bytes: &[u8], sidecar: &AlignmentSidecar) -> Result<Self> {
        if bytes.len() != sidecar.rows * sidecar.cols * 4 {
            return Err(Error::Format(format!(
                "alignment blob has {} bytes, expected {}",
                bytes.len(),
                sidecar.rows * sidecar.cols * 4
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let transform = Array2::from_shape_vec((sidecar.rows, sidecar.cols), values)
            .expect("length checked above");
        Ok(AlignmentMap {
            kind: sidecar.kind,
            transform,
            score: sidecar.score,
            scale: sidecar.scale,
            source_layer: sidecar.source_layer.clone(),
            target_layer: sidecar.target_layer.clone(),
            subsampled: sidecar.subsampled,
            non_unique: sidecar.non_unique,
        })
    }
}

fn check_pair(x: (usize, usize), y: (usize, usize)) -> Result<()> {
    if x.0 != y.0 {
        return Err(Error::Shape(format!("row counts differ: {} vs {}", x.0, y.0)));
    }
    if x.1 != y.1 {
        return Err(Error::Shape(format!(
            "feature counts differ: {} vs {} (pad explicitly with zero_pad_columns)",
            x.1, y.1
        )));
    }
    Ok(())
}

/// Orthogonal `Q = U·Vᵀ` from the SVD of `xᵀy`; reflections allowed.
fn orthogonal_factor(xty: &Array2<f64>) -> Result<(Array2<f64>, bool)> {
    let f = svd(&xty.view())?;
    Ok((f.u.dot(&f.v.t()), f.is_rank_deficient()))
}

/// Orthogonal Procrustes: the orthogonal `Q*` minimizing `‖X·Q − Y‖_F`.
pub fn procrustes_align<S1, S2, A, B>(x: &ArrayBase<S1, Ix2>, y: &ArrayBase<S2, Ix2>) -> Result<AlignmentMap>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair(x.dim(), y.dim())?;
    let (transform, non_unique) = orthogonal_factor(&cross(x, y))?;
    let score = procrustes_similarity(x, y)?;
    Ok(AlignmentMap {
        kind: AlignmentKind::Procrustes,
        transform,
        score: Some(score),
        scale: 1.0,
        source_layer: String::new(),
        target_layer: String::new(),
        subsampled: false,
        non_unique,
    })
}

/// The CKA-induced alignment: `argmin ‖XW − Y‖` under `tr(WᵀW) = 1`,
/// i.e. `W* = XᵀY / ‖XᵀY‖_F`.
pub fn cka_align<S1, S2, A, B>(x: &ArrayBase<S1, Ix2>, y: &ArrayBase<S2, Ix2>) -> Result<AlignmentMap>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "row counts differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let xty = cross(x, y);
    let z = frobenius(&xty.view());
    if z == 0.0 {
        return Err(Error::DegenerateInput("XᵀY is the zero matrix".into()));
    }
    let score = linear_cka_of(x, y).ok();
    Ok(AlignmentMap {
        kind: AlignmentKind::Cka,
        transform: xty / z,
        score,
        scale: z,
        source_layer: String::new(),
        target_layer: String::new(),
        subsampled: false,
        non_unique: false,
    })
}

/// Alignment of layers related by `Y = X·W`, from the SVD of `W` alone.
pub fn svd_layer_align<S, A>(w: &ArrayBase<S, Ix2>) -> Result<AlignmentMap>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    if w.nrows() != w.ncols() {
        return Err(Error::Shape(format!(
            "svd_layer_align needs a square matrix, got {}×{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let (transform, non_unique) = orthogonal_factor(&to_f64(w))?;
    Ok(AlignmentMap {
        kind: AlignmentKind::SvdLayer,
        transform,
        score: None,
        scale: 1.0,
        source_layer: String::new(),
        target_layer: String::new(),
        subsampled: false,
        non_unique,
    })
}

/// Appends zero columns so `m` has `d` columns. Never applied implicitly.
pub fn zero_pad_columns<S, A>(m: &ArrayBase<S, Ix2>, d: usize) -> Result<Array2<f64>>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    if m.ncols() > d {
        return Err(Error::Shape(format!(
            "cannot pad {} columns down to {d}",
            m.ncols()
        )));
    }
    let mut out = Array2::zeros((m.nrows(), d));
    out.slice_mut(ndarray::s![.., ..m.ncols()]).assign(&to_f64(m));
    Ok(out)
}

/// Straight-line path from the previous layer `y` to the aligned next layer `x·Q*`.
#[derive(Debug, Clone)]
pub struct InterpolationPath {
    pub y: Array2<f64>,
    pub x_aligned: Array2<f64>,
}

impl InterpolationPath {
    pub fn new<S1, S2, A, B>(y: &ArrayBase<S1, Ix2>, x: &ArrayBase<S2, Ix2>, map: &AlignmentMap) -> Result<Self>
    where
        S1: Data<Elem = A>,
        S2: Data<Elem = B>,
        A: Copy + Into<f64>,
        B: Copy + Into<f64>,
    {
        let x_aligned = map.apply(x)?;
        if x_aligned.dim() != y.dim() {
            return Err(Error::Shape(format!(
                "aligned source is {:?}, target is {:?}",
                x_aligned.dim(),
                y.dim()
            )));
        }
        Ok(InterpolationPath {
            y: to_f64(y),
            x_aligned,
        })
    }
}

/// `(1 − s)·y + s·x_aligned` for `s ∈ [0, 1]`.
pub fn interpolate(path: &InterpolationPath, s: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("interpolation parameter {s} outside [0, 1]")));
    }
    let mut out = path.y.clone();
    out.zip_mut_with(&path.x_aligned, |y, &x| *y = (1.0 - s) * *y + s * x);
    Ok(out)
}

fn subsample_rows(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction * n as f64).ceil() as usize).clamp(2.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    rows
}

/// Procrustes alignment of `x` onto `y`, estimating `Q*` on a seeded row
/// subsample when `fraction < 1` and scoring on all rows.
pub fn procrustes_align_subsampled<S1, S2, A, B>(
    x: &ArrayBase<S1, Ix2>,
    y: &ArrayBase<S2, Ix2>,
    fraction: f64,
    seed: u64,
) -> Result<AlignmentMap>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    check_pair(x.dim(), y.dim())?;
    if fraction >= 1.0 {
        return procrustes_align(x, y);
    }
    let rows = subsample_rows(x.nrows(), fraction, seed);
    let xs = x.select(Axis(0), &rows);
    let ys = y.select(Axis(0), &rows);
    let (transform, non_unique) = orthogonal_factor(&cross(&xs, &ys))?;
    Ok(AlignmentMap {
        kind: AlignmentKind::Procrustes,
        transform,
        score: Some(procrustes_similarity(x, y)?),
        scale: 1.0,
        source_layer: String::new(),
        target_layer: String::new(),
        subsampled: true,
        non_unique,
    })
}

/// Aligns each embedding onto its predecessor: `maps[i]` takes
/// `embeddings[i + 1]` onto `embeddings[i]`.
pub fn align_chain(
    embeddings: &[EmbeddingMatrix],
    subsample_fraction: f64,
    seed: u64,
) -> Result<Vec<AlignmentMap>> {
    if embeddings.len() < 2 {
        return Err(Error::Config("align_chain needs at least two layers".into()));
    }
    let (n, d) = embeddings[0].coords.dim();
    if let Some(bad) = embeddings.iter().find(|e| e.coords.dim() != (n, d)) {
        return Err(Error::Shape(format!(
            "{} is {:?}, expected ({n}, {d})",
            bad.layer_id,
            bad.coords.dim()
        )));
    }
    (0..embeddings.len() - 1)
        .into_par_iter()
        .map(|i| {
            let (prev, next) = (&embeddings[i], &embeddings[i + 1]);
            procrustes_align_subsampled(
                &next.coords,
                &prev.coords,
                subsample_fraction,
                seed.wrapping_add(i as u64),
            )
            .map(|m| m.with_layers(&next.layer_id, &prev.layer_id))
        })
        .collect()
}
