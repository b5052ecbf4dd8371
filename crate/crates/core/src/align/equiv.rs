use crate::error::{domain, GoatError, Result};
use crate::numkit::Matrix;

/// Dense view of an adapter at one step.
#[derive(Clone, Debug)]
pub struct EquivState {
    pub w_tilde: Matrix,
    pub g_tilde: Matrix,
    pub step: usize,
}

fn check_pair(b: &Matrix, a: &Matrix, g: &Matrix) -> Result<()> {
    if b.cols() != a.rows() {
        return Err(GoatError::Shape {
            op: "adapter factors",
            left: b.shape(),
            right: a.shape(),
        });
    }
    if g.shape() != (b.rows(), a.cols()) {
        return Err(GoatError::Shape {
            op: "gradient vs adapter",
            left: g.shape(),
            right: (b.rows(), a.cols()),
        });
    }
    Ok(())
}

/// `W₀ + s·b·a`.
pub fn equivalent_weight(w0: &Matrix, b: &Matrix, a: &Matrix, s: f64) -> Result<Matrix> {
    let mut w = w0.clone();
    w.add_scaled(s, &b.matmul(a)?)?;
    Ok(w)
}

/// `g̃ = s²·(b·bᵀ·g + g·aᵀ·a)`: the first-order change of the adapter's
/// dense weight per unit learning rate under SGD.
pub fn equivalent_gradient(b: &Matrix, a: &Matrix, g: &Matrix, s: f64) -> Result<Matrix> {
    check_pair(b, a, g)?;
    let left = b.matmul(&b.transpose().matmul(g)?)?;
    let right = g.matmul(&a.transpose())?.matmul(a)?;
    Ok(left.add(&right)?.scale(s * s))
}

/// One SGD step on the factors, given the gradient `g` of the loss with
/// respect to the dense weight: `b' = b − sη·g·aᵀ`, `a' = a − sη·bᵀ·g`.
pub fn sgd_step_lora(
    b: &Matrix,
    a: &Matrix,
    g: &Matrix,
    s: f64,
    eta: f64,
) -> Result<(Matrix, Matrix)> {
    if eta.is_nan() || eta <= 0.0 {
        return domain(format!("learning rate must be positive, got {eta}"));
    }
    check_pair(b, a, g)?;
    let mut b2 = b.clone();
    b2.add_scaled(-s * eta, &g.matmul(&a.transpose())?)?;
    let mut a2 = a.clone();
    a2.add_scaled(-s * eta, &b.transpose().matmul(g)?)?;
    Ok((b2, a2))
}

/// Exact split of one SGD step of `s·b·a`:
/// `delta = −η·g̃ + s·dB·dA`, with `residual` the floating-point mismatch.
#[derive(Clone, Debug)]
pub struct StepDecomposition {
    pub delta: Matrix,
    pub first_order: Matrix,
    pub remainder: Matrix,
    pub residual: f64,
}

pub fn decompose_lora_step(
    b: &Matrix,
    a: &Matrix,
    g: &Matrix,
    s: f64,
    eta: f64,
) -> Result<StepDecomposition> {
    let (b2, a2) = sgd_step_lora(b, a, g, s, eta)?;
    let delta = b2.matmul(&a2)?.sub(&b.matmul(a)?)?.scale(s);
    let first_order = equivalent_gradient(b, a, g, s)?.scale(-eta);
    let remainder = b2.sub(b)?.matmul(&a2.sub(a)?)?.scale(s);
    let residual = delta.sub(&first_order)?.sub(&remainder)?.frobenius_norm();
    Ok(StepDecomposition {
        delta,
        first_order,
        remainder,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{svd, Rng};
    use crate::svdseg::{build_single_lora_init, SingleLoraVariant};

    #[test]
    fn hand_equivalent_gradient() {
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let gt = equivalent_gradient(&b, &a, &g, 1.0).unwrap();
        assert_eq!(
            gt,
            Matrix::from_rows(&[vec![2.0, 2.0], vec![3.0, 0.0]]).unwrap()
        );
    }

    #[test]
    fn zero_b_leaves_right_term() {
        let mut rng = Rng::new(1);
        let a = rng.normal_matrix(2, 5, 1.0);
        let g = rng.normal_matrix(4, 5, 1.0);
        let gt = equivalent_gradient(&Matrix::zeros(4, 2), &a, &g, 3.0).unwrap();
        let want = g
            .matmul(&a.transpose().matmul(&a).unwrap())
            .unwrap()
            .scale(9.0);
        assert!(gt.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut rng = Rng::new(2);
        let b = rng.normal_matrix(3, 2, 1.0);
        let a = rng.normal_matrix(2, 4, 1.0);
        let (b2, a2) = sgd_step_lora(&b, &a, &Matrix::zeros(3, 4), 2.0, 0.1).unwrap();
        assert_eq!((b2, a2), (b, a));
    }

    #[test]
    fn step_from_zero_b() {
        let mut rng = Rng::new(3);
        let a = rng.normal_matrix(2, 4, 1.0);
        let g = rng.normal_matrix(3, 4, 1.0);
        let (s, eta) = (1.5, 0.01);
        let (b2, a2) = sgd_step_lora(&Matrix::zeros(3, 2), &a, &g, s, eta).unwrap();
        assert_eq!(a2, a);
        let direct = g
            .matmul(&a.transpose())
            .unwrap()
            .scale(-s * eta)
            .matmul(&a)
            .unwrap();
        assert!(b2.matmul(&a2).unwrap().sub(&direct).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn remainder_is_exact_and_quadratic() {
        let mut rng = Rng::new(4);
        let b = rng.normal_matrix(5, 2, 1.0);
        let a = rng.normal_matrix(2, 6, 1.0);
        let g = rng.normal_matrix(5, 6, 1.0);
        let mut ratios = Vec::new();
        for eta in [1e-2, 1e-3, 1e-4] {
            let d = decompose_lora_step(&b, &a, &g, 2.0, eta).unwrap();
            assert!(d.residual <= 1e-12 * d.delta.frobenius_norm().max(1e-300) + 1e-15);
            ratios.push(d.remainder.frobenius_norm() / eta);
        }
        assert!(ratios[0] / ratios[1] >= 8.0);
        assert!(ratios[1] / ratios[2] >= 8.0);
    }

    #[test]
    fn svd_init_weight_invariant_gradient_proportional() {
        let mut rng = Rng::new(5);
        let w0 = rng.normal_matrix(6, 5, 1.0);
        let g = rng.normal_matrix(6, 5, 1.0);
        let f = svd(&w0).unwrap();
        let mut per_s = Vec::new();
        for s in [1.0, 2.0, 4.0, 8.0] {
            let (p, frozen) = build_single_lora_init(&f, SingleLoraVariant::PiSSA, 2, s).unwrap();
            let w = equivalent_weight(&frozen, &p.b, &p.a, s).unwrap();
            assert!(w.sub(&w0).unwrap().frobenius_norm() < 1e-12);
            per_s.push(
                equivalent_gradient(&p.b, &p.a, &g, s)
                    .unwrap()
                    .frobenius_norm()
                    / s,
            );
        }
        for v in &per_s {
            assert!((v / per_s[0] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let b = Matrix::zeros(3, 2);
        let a = Matrix::zeros(2, 4);
        assert!(equivalent_gradient(&b, &a, &Matrix::zeros(4, 3), 1.0).is_err());
        assert!(equivalent_gradient(&b, &Matrix::zeros(3, 4), &Matrix::zeros(3, 4), 1.0).is_err());
        assert!(sgd_step_lora(&b, &a, &Matrix::zeros(3, 4), 1.0, 0.0).is_err());
    }
}
