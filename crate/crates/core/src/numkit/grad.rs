use crate::error::{GoatError, Result};
use crate::numkit::Matrix;

/// Central-difference gradient of a scalar function of a matrix.
///
/// Entry `(i, j)` is `(f(x + h·eᵢⱼ) − f(x − h·eᵢⱼ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(GoatError::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (rows, cols) = x.shape();
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + h);
            let plus = f(&probe);
            probe.set(i, j, orig - h);
            let minus = f(&probe);
            probe.set(i, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GoatError::Numeric(format!(
                    "objective not finite around entry ({i}, {j})"
                )));
            }
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    #[test]
    fn quadratic() {
        let x = Rng::new(1).normal_matrix(3, 4, 1.0);
        let g = finite_diff_grad(|m| m.frobenius_norm_sq(), &x, 1e-4).unwrap();
        let err = g.sub(&x.scale(2.0)).unwrap().max_abs();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_trace() {
        let mut rng = Rng::new(2);
        let a = rng.normal_matrix(3, 3, 1.0);
        let x = rng.normal_matrix(3, 3, 1.0);
        let g = finite_diff_grad(|m| a.matmul(m).unwrap().trace(), &x, 1e-3).unwrap();
        assert!(g.sub(&a.transpose()).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn mse_of_linear_model() {
        // L(W) = 1/(2N) Σ ‖W x_t − y_t‖², ∂L/∂W = 1/N Σ (W x_t − y_t) x_tᵀ
        let xs = [[1.0, 2.0], [-0.5, 0.3], [2.0, -1.0]];
        let ys = [[0.5, 1.0], [0.0, -1.0], [1.5, 0.2]];
        let w = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.4]]).unwrap();
        let loss = |m: &Matrix| {
            xs.iter()
                .zip(&ys)
                .map(|(x, y)| {
                    let p = m.matvec(x).unwrap();
                    (p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)
                })
                .sum::<f64>()
                / (2.0 * xs.len() as f64)
        };
        let mut closed = Matrix::zeros(2, 2);
        for (x, y) in xs.iter().zip(&ys) {
            let p = w.matvec(x).unwrap();
            let r = [p[0] - y[0], p[1] - y[1]];
            closed.add_outer(1.0 / xs.len() as f64, &r, x).unwrap();
        }
        let fd = finite_diff_grad(loss, &w, 1e-5).unwrap();
        assert!(fd.sub(&closed).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn reports_non_finite() {
        let x = Matrix::zeros(1, 1);
        let err = finite_diff_grad(|m| 1.0 / m.get(0, 0).abs().min(0.0), &x, 1e-3);
        assert!(matches!(err, Err(GoatError::Numeric(_))));
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
