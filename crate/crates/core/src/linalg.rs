//! Dense linear algebra on small `f64` matrices: one-sided Jacobi SVD,
//! nuclear norm, Gram–Schmidt, and a few helpers shared by the similarity,
//! alignment and tour modules.

use ndarray::{Array2, ArrayBase, ArrayView2, Data, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = u · diag(singular_values) · vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows×r`, orthonormal columns.
    pub u: Array2<f64>,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols×r`, orthonormal columns.
    pub v: Array2<f64>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut us = self.u.clone();
        for (mut col, s) in us.columns_mut().into_iter().zip(&self.singular_values) {
            col *= *s;
        }
        us.dot(&self.v.t())
    }

    /// Whether the smallest singular value is negligible relative to the largest.
    pub fn is_rank_deficient(&self) -> bool {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        let min = self.singular_values.last().copied().unwrap_or(0.0);
        let dim = self.u.nrows().max(self.v.nrows()) as f64;
        max == 0.0 || min <= max * dim * 1e3 * f64::EPSILON
    }
}

/// Converts any real 2-D array to an owned `f64` matrix.
pub fn to_f64<S, A>(m: &ArrayBase<S, Ix2>) -> Array2<f64>
where
    S: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    m.mapv(Into::into)
}

/// `xᵀ·y` accumulated in f64.
pub fn cross<S1, S2, A, B>(x: &ArrayBase<S1, Ix2>, y: &ArrayBase<S2, Ix2>) -> Array2<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = B>,
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    to_f64(x).t().dot(&to_f64(y))
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `max |mᵀm − I|`.
pub fn orthogonality_error(m: &ArrayView2<f64>) -> f64 {
    let gram = m.t().dot(m);
    let mut worst = 0.0f64;
    for ((i, j), v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(m: &ArrayView2<f64>) -> Result<SvdFactors> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("cannot decompose a {rows}×{cols} matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("svd input contains non-finite values".into()));
    }
    if rows < cols {
        let t = svd_tall(&m.t())?;
        return Ok(SvdFactors {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    svd_tall(m)
}

/// Jacobi SVD for `rows ≥ cols`.
fn svd_tall(m: &ArrayView2<f64>) -> Result<SvdFactors> {
    let (rows, cols) = m.dim();
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = rows as f64 * f64::EPSILON;

    let mut converged = cols == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..rows {
                        alpha += ap[k] * ap[k];
                        beta += aq[k] * aq[k];
                        gamma += ap[k] * aq[k];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let negligible = sigma_max * rows as f64 * f64::EPSILON;
    let mut u = Array2::<f64>::zeros((rows, cols));
    let mut vv = Array2::<f64>::zeros((cols, cols));
    let mut singular_values = Vec::with_capacity(cols);
    let mut filled = 0;
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..cols {
            vv[[i, slot]] = v[j][i];
        }
        if norms[j] > negligible && norms[j] > 0.0 {
            for i in 0..rows {
                u[[i, slot]] = a[j][i] / norms[j];
            }
            singular_values.push(norms[j]);
            filled += 1;
        } else {
            singular_values.push(0.0);
            pending.push(slot);
        }
    }
    debug_assert_eq!(filled + pending.len(), cols);
    complete_basis(&mut u, &pending);
    Ok(SvdFactors {
        u,
        singular_values,
        v: vv,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for k in 0..cp.len() {
        let x = cp[k];
        let y = cq[k];
        cp[k] = c * x - s * y;
        cq[k] = s * x + c * y;
    }
}

/// Overwrites column `slot` of `u` with a unit vector orthogonal to the
/// (orthonormal) columns listed in `against`, drawn from the standard basis.
fn complete_column(u: &mut Array2<f64>, slot: usize, against: &[usize]) {
    let rows = u.nrows();
    for candidate in 0..rows {
        let mut vec = vec![0.0; rows];
        vec[candidate] = 1.0;
        for _ in 0..2 {
            for &other in against {
                let dot: f64 = (0..rows).map(|k| u[[k, other]] * vec[k]).sum();
                for k in 0..rows {
                    vec[k] -= dot * u[[k, other]];
                }
            }
        }
        let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for k in 0..rows {
                u[[k, slot]] = vec[k] / norm;
            }
            return;
        }
    }
    unreachable!("fewer orthonormal columns than rows always leave a free direction");
}

/// Fills the listed (zero) columns of `u` so all columns are orthonormal.
fn complete_basis(u: &mut Array2<f64>, slots: &[usize]) {
    let mut done: Vec<usize> = (0..u.ncols()).filter(|c| !slots.contains(c)).collect();
    for &slot in slots {
        complete_column(u, slot, &done);
        done.push(slot);
    }
}

/// Sum of singular values.
pub fn nuclear_norm(m: &ArrayView2<f64>) -> Result<f64> {
    Ok(svd(m)?.singular_values.iter().sum())
}

/// Ordered modified Gram–Schmidt over the columns, in place, with one
/// re-orthogonalization pass. A column that collapses is replaced by a unit
/// vector orthogonal to its predecessors.
pub fn gram_schmidt_columns(m: &mut Array2<f64>) {
    let (rows, cols) = m.dim();
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..rows).map(|k| m[[k, i]] * m[[k, j]]).sum();
                for k in 0..rows {
                    m[[k, j]] -= dot * m[[k, i]];
                }
            }
        }
        let norm = m.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            m.column_mut(j).mapv_inplace(|x| x / norm);
        } else {
            let previous: Vec<usize> = (0..j).collect();
            complete_column(m, j, &previous);
        }
    }
}

/// Haar-distributed random orthogonal `p×p` matrix (Gram–Schmidt of a Gaussian matrix).
pub fn random_orthogonal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((p, p), |_| rng.sample::<f64, _>(StandardNormal));
    gram_schmidt_columns(&mut m);
    m
}

/// Trace of `aᵀ·b`.
pub fn trace_inner(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(m: &Array2<f64>) -> SvdFactors {
        let f = svd(&m.view()).unwrap();
        let r = m.nrows().min(m.ncols());
        assert_eq!(f.singular_values.len(), r);
        assert!(orthogonality_error(&f.u.view()) <= 1e-6);
        assert!(orthogonality_error(&f.v.view()) <= 1e-6);
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.singular_values.iter().all(|&s| s >= 0.0));
        let err = frobenius(&(f.reconstruct() - m).view());
        assert!(err <= 1e-5 * (1.0 + frobenius(&m.view())), "reconstruction error {err}");
        f
    }

    #[test]
    fn identity_and_diagonal() {
        let f = check(&Array2::eye(3));
        assert_eq!(f.singular_values, vec![1.0, 1.0, 1.0]);
        let f = check(&array![[3.0, 0.0], [0.0, 4.0]]);
        assert_eq!(f.singular_values, vec![4.0, 3.0]);
    }

    #[test]
    fn rank_one() {
        let f = check(&array![[0.0, 2.0], [0.0, 0.0]]);
        assert_eq!(f.singular_values, vec![2.0, 0.0]);
        assert!(f.is_rank_deficient());
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let f = check(&Array2::zeros((4, 3)));
        assert!(f.singular_values.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rectangular_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(7, 3), (3, 7), (1, 5), (5, 1), (12, 12)] {
            let m = Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0));
            check(&m);
        }
    }

    #[test]
    fn nuclear_norm_basics() {
        assert_eq!(nuclear_norm(&Array2::<f64>::eye(5).view()).unwrap(), 5.0);
        assert_eq!(nuclear_norm(&array![[3.0, 0.0], [0.0, 4.0]].view()).unwrap(), 7.0);
    }

    #[test]
    fn non_finite_rejected() {
        let m = array![[1.0, f64::NAN]];
        assert!(matches!(svd(&m.view()), Err(Error::Numerical(_))));
    }

    #[test]
    fn gram_schmidt_handles_dependent_columns() {
        let mut m = array![[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        gram_schmidt_columns(&mut m);
        assert!(orthogonality_error(&m.view()) < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_orthogonal(15, &mut rng);
        assert!(orthogonality_error(&q.view()) < 1e-12);
    }
}
