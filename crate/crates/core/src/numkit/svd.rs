//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of the matrix are rotated pairwise until every
//! pair is orthogonal to within [`ORTHO_TOL`] (relative to the column
//! norms). The column norms are then the singular values, the normalised
//! columns the left vectors, and the accumulated rotations the right
//! vectors. Wide matrices are handled by factorising the transpose.
//!
//! Output conventions:
//! * singular values are sorted descending with a stable sort, so exactly
//!   equal values keep the order the sweep produced them in;
//! * the first entry of each left vector with magnitude above
//!   [`SIGN_EPS`] is non-negative (right vector flipped with it);
//! * left vectors belonging to (numerically) zero singular values are
//!   completed to an orthonormal set by Gram-Schmidt on the standard basis.

use crate::error::{GoatError, Result};
use crate::numkit::matrix::{dot, Matrix};

pub const MAX_SWEEPS: usize = 100;
pub const ORTHO_TOL: f64 = 1e-12;
const SIGN_EPS: f64 = 1e-12;

/// `W = U · diag(sigma) · Vᵀ` with `h = min(m, n)` columns in `u` and `v`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// `(rows, cols)` of the factorised matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// Sum of the singular triples `start..start + width`.
    pub fn reconstruct_range(&self, start: usize, width: usize) -> Result<Matrix> {
        let h = self.sigma.len();
        if start + width > h {
            return Err(GoatError::Domain(format!(
                "singular range {start}..{} outside spectrum of length {h}",
                start + width
            )));
        }
        let (m, n) = self.shape();
        let mut out = Matrix::zeros(m, n);
        for j in start..start + width {
            out.add_outer(self.sigma[j], &self.u.col(j), &self.v.col(j))?;
        }
        Ok(out)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_range(0, self.sigma.len())
            .expect("full range is always in bounds")
    }
}

/// Thin singular value decomposition.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(GoatError::Domain("svd of an empty matrix".into()));
    }
    w.ensure_finite("svd input")?;
    let (u, sigma, v) = if w.rows() >= w.cols() {
        jacobi_tall(w)?
    } else {
        let (u_t, sigma, v_t) = jacobi_tall(&w.transpose())?;
        (v_t, sigma, u_t)
    };
    Ok(fix_signs(u, sigma, v))
}

type Columns = Vec<Vec<f64>>;

/// One-sided Jacobi on a matrix with `rows >= cols`; returns column lists.
fn jacobi_tall(w: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = w.shape();
    let mut a: Columns = (0..n).map(|j| w.col(j)).collect();
    let mut v: Columns = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        worst = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off < ORTHO_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GoatError::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps; worst column cosine {worst:.3e}"
        )));
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep sweep order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma_max = norms[order[0]];
    let zero_cut = sigma_max.max(f64::MIN_POSITIVE) * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Columns = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > zero_cut {
            u_cols.push(a[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &pending, m);

    let sigma = order.iter().map(|&j| norms[j]).collect();
    let v_cols = order.iter().map(|&j| v[j].clone()).collect();
    Ok((u_cols, sigma, v_cols))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the columns listed in `pending` with unit vectors orthogonal to all
/// other columns.
fn complete_orthonormal(cols: &mut Columns, pending: &[usize], dim: usize) {
    if pending.is_empty() {
        return;
    }
    let mut basis = 0;
    for &slot in pending {
        while basis < dim {
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for _pass in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > 0.5 {
                cols[slot] = cand.into_iter().map(|c| c / nrm).collect();
                break;
            }
        }
    }
}

fn fix_signs(mut u: Columns, sigma: Vec<f64>, mut v: Columns) -> SvdFactors {
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        let lead = uc
            .iter()
            .copied()
            .find(|x| x.abs() > SIGN_EPS)
            .unwrap_or(0.0);
        if lead < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
    SvdFactors {
        u: from_columns(&u),
        sigma,
        v: from_columns(&v),
    }
}

fn from_columns(cols: &Columns) -> Matrix {
    let rows = cols.first().map_or(0, Vec::len);
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn ortho_error(q: &Matrix) -> f64 {
        let gram = q.transpose().matmul(q).unwrap();
        gram.sub(&Matrix::identity(q.cols())).unwrap().max_abs()
    }

    fn check_invariants(w: &Matrix, f: &SvdFactors) {
        let h = w.rows().min(w.cols());
        assert_eq!(f.sigma.len(), h);
        assert_eq!(f.u.shape(), (w.rows(), h));
        assert_eq!(f.v.shape(), (w.cols(), h));
        for pair in f.sigma.windows(2) {
            assert!(pair[0] >= pair[1] && pair[1] >= 0.0);
        }
        assert!(ortho_error(&f.u) <= 1e-8, "u not orthonormal");
        assert!(ortho_error(&f.v) <= 1e-8, "v not orthonormal");
        let resid = f.reconstruct().sub(w).unwrap().frobenius_norm();
        assert!(
            resid <= 1e-8 * w.frobenius_norm().max(1.0),
            "residual {resid}"
        );
        for j in 0..h {
            let lead = f.u.col(j).into_iter().find(|x| x.abs() > SIGN_EPS).unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn identity_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        assert!(f.u.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-15);
        assert!(f.v.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let w = Matrix::diag(&[1.0, 4.0, 2.0, 3.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![4.0, 3.0, 2.0, 1.0]);
        check_invariants(&w, &f);
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let mut rng = Rng::new(8);
        let x = rng.normal_matrix(6, 2, 1.0);
        let y = rng.normal_matrix(2, 5, 1.0);
        let w = x.matmul(&y).unwrap();
        let f = svd(&w).unwrap();
        check_invariants(&w, &f);
        assert!(f.sigma[2] < 1e-12);

        let zero = Matrix::zeros(3, 4);
        let fz = svd(&zero).unwrap();
        check_invariants(&zero, &fz);
        assert!(fz.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_shapes_round_trip() {
        let mut rng = Rng::new(2024);
        for &(m, n) in &[(6, 4), (4, 6), (1, 5), (5, 1), (9, 9), (17, 3)] {
            let w = rng.normal_matrix(m, n, 1.0);
            let f = svd(&w).unwrap();
            check_invariants(&w, &f);
        }
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(matches!(
            svd(&Matrix::zeros(0, 3)),
            Err(GoatError::Domain(_))
        ));
    }

    #[test]
    fn eckart_young_on_diagonal() {
        let sig = [5.0, 4.0, 2.5, 1.0, 0.5];
        let w = Matrix::diag(&sig);
        let f = svd(&w).unwrap();
        for r in 0..=sig.len() {
            let approx = f.reconstruct_range(0, r).unwrap();
            let err = w.sub(&approx).unwrap().frobenius_norm();
            let expect = sig[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert_eq!(err, expect);
        }
    }
}
