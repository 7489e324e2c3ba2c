//! Layer similarity indices: linear CKA and the nuclear-norm Procrustes index,
//! similarity matrices over layer lists, per-class CKA spread, and Pearson r.
//!
//! All scores are accumulated in f64 regardless of the storage precision of
//! the inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayBase, Data, Ix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, nuclear_norm, to_f64};
use crate::preprocess::ActivationMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    CkaLinear,
    Procrustes,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::CkaLinear => "cka_linear",
            IndexKind::Procrustes => "procrustes",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka_linear" | "cka" => Ok(IndexKind::CkaLinear),
            "procrustes" | "s_op" => Ok(IndexKind::Procrustes),
            other => Err(Error::Config(format!("unknown similarity kind {other:?}"))),
        }
    }
}

/// Example-by-example inner products `K = M·Mᵀ`. Only used on small
/// instances; CKA itself works in feature space.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: Array2<f64>,
}

impl GramMatrix {
    pub fn from_rows<S, A>(m: &ArrayBase<S, Ix2>) -> Self
    where
        S: Data<Elem = A>,
        A: Copy + Into<f64>,
    {
        let m = to_f64(m);
        GramMatrix {
            values: m.dot(&m.t()),
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Frobenius inner product `⟨K, L⟩ = Σ K_ij L_ij`.
    pub fn inner(&self, other: &GramMatrix) -> f64 {
        self.values.iter().zip(other.values.iter()).map(|(a, b)| a * b).sum()
    }
}

fn check_rows(nx: usize, ny: usize) -> Result<()> {
    if nx != ny {
        return Err(Error::Shape(format!("example counts differ: {nx} vs {ny}")));
    }
    if nx < 2 {
        return Err(Error::Shape(format!("need at least 2 examples, got {nx}")));
    }
    Ok(())
}

fn centered_f64<S, A>(m: &ArrayBase<S, Ix2>) -> Array2<f64>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    let mut out = to_f64(m);
    let n = out.nrows() as f64;
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        col -= mean;
    }
    out
}

/// CKA of already-centered f64 matrices.
fn cka_centered(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let xx = frobenius(&x.t().dot(x).view());
    let yy = frobenius(&y.t().dot(y).view());
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateInput("zero-variance representation".into()));
    }
    let xy = frobenius(&x.t().dot(y).view());
    Ok(xy * xy / (xx * yy))
}

/// Linear CKA of two centered activation matrices.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    check_rows(x.n(), y.n())?;
    if !x.centered || !y.centered {
        return Err(Error::Validation(
            "linear_cka requires column-centered inputs".into(),
        ));
    }
    cka_centered(&to_f64(&x.values), &to_f64(&y.values))
}

/// Linear CKA of arbitrary matrices; columns are centered internally.
pub fn linear_cka_of<S1, S2, A, B>(x: &ArrayBase<S1, Ix2>, y: &ArrayBase<S2, Ix2>) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_rows(x.nrows(), y.nrows())?;
    cka_centered(&centered_f64(x), &centered_f64(y))
}

/// Nuclear-norm Procrustes index `‖XᵀY‖_* / sqrt(‖XᵀX‖_* ‖YᵀY‖_*)`, on the
/// matrices exactly as given (no centering).
pub fn procrustes_similarity<S1, S2, A, B>(
    x: &ArrayBase<S1, Ix2>,
    y: &ArrayBase<S2, Ix2>,
) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_rows(x.nrows(), y.nrows())?;
    procrustes_f64(&to_f64(x), &to_f64(y))
}

fn procrustes_f64(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    // XᵀX is PSD, so its nuclear norm is its trace, i.e. ‖X‖_F².
    let xx = x.iter().map(|v| v * v).sum::<f64>();
    let yy = y.iter().map(|v| v * v).sum::<f64>();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateInput("all-zero representation".into()));
    }
    let xy = nuclear_norm(&x.t().dot(y).view())?;
    Ok(xy / (xx * yy).sqrt())
}

/// Computes one index on a pair of matrices (CKA centers internally).
pub fn index_of<S1, S2, A, B>(
    kind: IndexKind,
    x: &ArrayBase<S1, Ix2>,
    y: &ArrayBase<S2, Ix2>,
) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    match kind {
        IndexKind::CkaLinear => linear_cka_of(x, y),
        IndexKind::Procrustes => procrustes_similarity(x, y),
    }
}

/// Scores between two ordered layer lists. Degenerate cells are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    #[serde(with = "nan_as_null")]
    pub scores: Vec<Vec<f64>>,
    pub index_kind: IndexKind,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i][j]
    }

    pub fn is_square(&self) -> bool {
        self.rows.len() == self.cols.len()
    }

    /// Strict upper triangle (row-major) for square matrices; every cell otherwise.
    pub fn comparison_values(&self) -> Vec<f64> {
        if self.is_square() {
            let k = self.rows.len();
            (0..k)
                .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                .map(|(i, j)| self.scores[i][j])
                .collect()
        } else {
            self.scores.iter().flatten().copied().collect()
        }
    }

    /// CSV with a header row of column layer ids; empty fields for NaN cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for c in &self.cols {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.scores) {
            out.push_str(&csv_field(r));
            for v in row {
                out.push(',');
                if v.is_finite() {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(scores: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Vec<Option<f64>>> = scores
            .iter()
            .map(|row| row.iter().map(|v| v.is_finite().then_some(*v)).collect())
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let opt: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

enum Prepared {
    Cka { centered: Array2<f64>, self_norm: f64 },
    Procrustes { values: Array2<f64>, self_trace: f64 },
}

fn prepare(kind: IndexKind, m: &ActivationMatrix) -> Prepared {
    match kind {
        IndexKind::CkaLinear => {
            let centered = if m.centered {
                to_f64(&m.values)
            } else {
                centered_f64(&m.values)
            };
            let self_norm = frobenius(&centered.t().dot(&centered).view());
            Prepared::Cka {
                centered,
                self_norm,
            }
        }
        IndexKind::Procrustes => {
            let values = to_f64(&m.values);
            let self_trace = values.iter().map(|v| v * v).sum();
            Prepared::Procrustes { values, self_trace }
        }
    }
}

fn score(a: &Prepared, b: &Prepared) -> Result<f64> {
    match (a, b) {
        (
            Prepared::Cka { centered: x, self_norm: xx },
            Prepared::Cka { centered: y, self_norm: yy },
        ) => {
            if *xx == 0.0 || *yy == 0.0 {
                return Err(Error::DegenerateInput("zero-variance representation".into()));
            }
            let xy = frobenius(&x.t().dot(y).view());
            Ok(xy * xy / (xx * yy))
        }
        (
            Prepared::Procrustes { values: x, self_trace: xx },
            Prepared::Procrustes { values: y, self_trace: yy },
        ) => {
            if *xx == 0.0 || *yy == 0.0 {
                return Err(Error::DegenerateInput("all-zero representation".into()));
            }
            Ok(nuclear_norm(&x.t().dot(y).view())? / (xx * yy).sqrt())
        }
        _ => unreachable!("both sides are prepared with the same kind"),
    }
}

/// `scores[i][j] = index(a[i], b[j])`. For CKA the inputs are centered
/// internally; a degenerate pair yields a NaN cell instead of an error.
pub fn similarity_matrix(
    a: &[ActivationMatrix],
    b: &[ActivationMatrix],
    kind: IndexKind,
) -> Result<SimilarityMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("similarity_matrix needs non-empty layer lists".into()));
    }
    let n = a[0].n();
    for m in a.iter().chain(b) {
        check_rows(n, m.n())?;
    }
    let pa: Vec<Prepared> = a.par_iter().map(|m| prepare(kind, m)).collect();
    let pb: Vec<Prepared> = b.par_iter().map(|m| prepare(kind, m)).collect();
    let cells: Vec<(usize, usize)> = (0..a.len())
        .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| match score(&pa[i], &pb[j]) {
            Ok(v) => Ok(v),
            Err(Error::DegenerateInput(msg)) => {
                log::warn!(
                    "{} vs {}: {msg}; cell flagged",
                    a[i].layer_id,
                    b[j].layer_id
                );
                Ok(f64::NAN)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let scores = values.chunks(b.len()).map(<[f64]>::to_vec).collect();
    Ok(SimilarityMatrix {
        rows: a.iter().map(|m| m.layer_id.clone()).collect(),
        cols: b.iter().map(|m| m.layer_id.clone()).collect(),
        scores,
        index_kind: kind,
    })
}

/// Per-class similarity matrices, their element-wise mean and each class's deviation.
#[derive(Debug, Clone)]
pub struct PerClassSimilarity {
    pub per_class: BTreeMap<i64, SimilarityMatrix>,
    pub mean: SimilarityMatrix,
    pub deviation: BTreeMap<i64, SimilarityMatrix>,
    /// Classes left out because they had fewer than two examples: (class, count).
    pub skipped: Vec<(i64, usize)>,
}

pub fn per_class_similarity(
    layers: &[ActivationMatrix],
    labels: &[i64],
    kind: IndexKind,
) -> Result<PerClassSimilarity> {
    if layers.is_empty() {
        return Err(Error::Config("per_class_similarity needs at least one layer".into()));
    }
    if labels.len() != layers[0].n() {
        return Err(Error::Shape(format!(
            "{} labels for {} examples",
            labels.len(),
            layers[0].n()
        )));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }

    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for (class, rows) in &members {
        if rows.len() < 2 {
            log::warn!("class {class} has {} example(s); skipped", rows.len());
            skipped.push((*class, rows.len()));
            continue;
        }
        let subset: Vec<ActivationMatrix> = layers.iter().map(|l| l.select_rows(rows)).collect();
        per_class.insert(*class, similarity_matrix(&subset, &subset, kind)?);
    }
    let Some(first) = per_class.values().next() else {
        return Err(Error::Config("no class has at least two examples".into()));
    };

    let k = layers.len();
    let mut mean_scores = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        for j in 0..k {
            let vals: Vec<f64> = per_class
                .values()
                .map(|m| m.scores[i][j])
                .filter(|v| v.is_finite())
                .collect();
            if !vals.is_empty() {
                mean_scores[i][j] = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
    }
    let mean = SimilarityMatrix {
        rows: first.rows.clone(),
        cols: first.cols.clone(),
        scores: mean_scores,
        index_kind: kind,
    };
    let deviation = per_class
        .iter()
        .map(|(class, m)| {
            let scores = m
                .scores
                .iter()
                .zip(&mean.scores)
                .map(|(r, mr)| r.iter().zip(mr).map(|(v, mv)| v - mv).collect())
                .collect();
            (
                *class,
                SimilarityMatrix {
                    scores,
                    ..m.clone()
                },
            )
        })
        .collect();
    Ok(PerClassSimilarity {
        per_class,
        mean,
        deviation,
        skipped,
    })
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Shape(format!("need at least 3 pairs, got {}", a.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput("zero variance in pearson_r input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cross;
    use crate::preprocess::center_columns;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn mat(id: &str, v: Array2<f32>) -> ActivationMatrix {
        ActivationMatrix::new(id, v)
    }

    #[test]
    fn cka_hand_value() {
        // ‖x̂ᵀŷ‖² = 1, ‖x̂ᵀx̂‖ = ‖ŷᵀŷ‖ = 2.
        let x = center_columns(&mat("x", array![[1f32], [-1.], [0.]]));
        let y = center_columns(&mat("y", array![[1f32], [0.], [-1.]]));
        assert_abs_diff_eq!(linear_cka(&x, &y).unwrap(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(linear_cka(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cka_requires_centering_and_matching_n() {
        let x = mat("x", array![[1f32], [2.], [4.]]);
        assert!(matches!(linear_cka(&x, &x), Err(Error::Validation(_))));
        let y = center_columns(&mat("y", array![[1f32], [2.]]));
        let xc = center_columns(&x);
        assert!(matches!(linear_cka(&xc, &y), Err(Error::Shape(_))));
        let z = center_columns(&mat("z", array![[3f32], [3.], [3.]]));
        assert!(matches!(linear_cka(&xc, &z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn procrustes_hand_value() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![[1.0, 0.0], [0.0, 0.0]];
        let s = procrustes_similarity(&x, &y).unwrap();
        assert_abs_diff_eq!(s, 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(procrustes_similarity(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn procrustes_scale_invariant() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.25]];
        let y = array![[0.0, 1.0], [2.0, 1.0], [-1.0, 0.5]];
        let a = procrustes_similarity(&x, &y).unwrap();
        let b = procrustes_similarity(&(&x * 3.7), &y).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn gram_identity() {
        let x = array![[1.0, 2.0, 0.5], [0.0, -1.0, 2.0], [3.0, 1.0, 1.0], [0.5, 0.5, -2.0]];
        let y = array![[2.0, 1.0], [1.0, 0.0], [-1.0, 3.0], [0.0, 1.0]];
        let k = GramMatrix::from_rows(&x);
        let l = GramMatrix::from_rows(&y);
        let xy = frobenius(&cross(&x, &y).view());
        assert_abs_diff_eq!(k.inner(&l), xy * xy, epsilon = 1e-9);
    }

    #[test]
    fn matrix_shapes_and_nan_cells() {
        let l1 = mat("l1", array![[1f32, 0.], [0., 1.], [1., 1.]]);
        let l2 = mat("l2", array![[2f32, 1.], [0., 3.], [1., -1.]]);
        let dead = mat("dead", Array2::zeros((3, 2)));
        let m = similarity_matrix(&[l1.clone()], &[l1.clone()], IndexKind::Procrustes).unwrap();
        assert_abs_diff_eq!(m.get(0, 0), 1.0, epsilon = 1e-12);

        let layers = [l1, l2, dead];
        for kind in [IndexKind::CkaLinear, IndexKind::Procrustes] {
            let m = similarity_matrix(&layers, &layers, kind).unwrap();
            assert_abs_diff_eq!(m.get(0, 0), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(m.get(1, 1), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(m.get(0, 1), m.get(1, 0), epsilon = 1e-12);
            assert!(m.get(2, 0).is_nan());
            let json = serde_json::to_string(&m).unwrap();
            assert!(json.contains("null"));
            let back: SimilarityMatrix = serde_json::from_str(&json).unwrap();
            assert!(back.get(2, 2).is_nan());
            assert_eq!(back.get(0, 1), m.get(0, 1));
        }
        assert!(matches!(
            similarity_matrix(&[], &layers, IndexKind::CkaLinear),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let m = SimilarityMatrix {
            rows: vec!["a".into(), "b".into()],
            cols: vec!["c".into()],
            scores: vec![vec![0.5], vec![f64::NAN]],
            index_kind: IndexKind::CkaLinear,
        };
        assert_eq!(m.to_csv(), "layer,c\na,0.5\nb,\n");
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        assert_abs_diff_eq!(pearson_r(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(pearson_r(&a, &c).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_r(&[1., 2., 3.], &[1., 3., 2.]).unwrap(), 0.5, epsilon = 1e-12);
        assert!(matches!(pearson_r(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::DegenerateInput(_))));
        assert!(pearson_r(&[1., 2.], &[1., 2.]).is_err());
    }

    #[test]
    fn per_class_single_class_has_zero_deviation() {
        let l1 = mat("l1", array![[1f32, 0.], [0., 1.], [1., 1.], [2., -1.]]);
        let l2 = mat("l2", array![[2f32, 1.], [0., 3.], [1., -1.], [0., 0.5]]);
        let out = per_class_similarity(&[l1, l2], &[7, 7, 7, 7], IndexKind::CkaLinear).unwrap();
        assert_eq!(out.per_class.len(), 1);
        assert!(out.deviation[&7].scores.iter().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn per_class_identical_rows_and_skips() {
        // Class 0 and class 1 hold the same rows; class 2 has one example.
        let rows = array![[1f32, 0.], [0., 1.], [1., 1.], [1., 0.], [0., 1.], [1., 1.], [5., 5.]];
        let l1 = mat("l1", rows.clone());
        let l2 = mat("l2", rows.mapv(|v| v * v + 0.5 * v));
        let labels = [0, 0, 0, 1, 1, 1, 2];
        let out = per_class_similarity(&[l1, l2], &labels, IndexKind::CkaLinear).unwrap();
        assert_eq!(out.skipped, vec![(2, 1)]);
        for dev in out.deviation.values() {
            assert!(dev.scores.iter().flatten().all(|v| v.abs() < 1e-12));
        }
    }
}
