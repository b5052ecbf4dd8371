use serde::{Deserialize, Serialize};

use crate::error::{domain, GoatError, Result};
use crate::numkit::{Matrix, Rng};

/// Linear top-k router: logits `z = wz · x`, `wz` is `E × n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Router {
    pub wz: Matrix,
    pub k: usize,
}

/// Outcome of routing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteResult {
    /// Selected experts in ascending index order.
    pub indices: Vec<usize>,
    /// Mixture weights over all `E` experts, zero off `indices`.
    pub weights: Vec<f64>,
    /// Raw logits the selection was made from.
    pub logits: Vec<f64>,
}

impl RouteResult {
    pub fn experts(&self) -> usize {
        self.weights.len()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Standard router init: entries i.i.d. `N(0, 0.02²)`.
pub const ROUTER_INIT_STD: f64 = 0.02;

impl Router {
    pub fn new(wz: Matrix, k: usize) -> Result<Self> {
        if k == 0 || k > wz.rows() {
            return domain(format!("top-k must be in 1..={}, got {k}", wz.rows()));
        }
        Ok(Self { wz, k })
    }

    pub fn random(experts: usize, input_dim: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(rng.normal_matrix(experts, input_dim, ROUTER_INIT_STD), k)
    }

    pub fn experts(&self) -> usize {
        self.wz.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.wz.cols()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GoatError::Numeric("router input is not finite".into()));
        }
        let z = self.wz.matvec(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GoatError::Numeric("router logits are not finite".into()));
        }
        Ok(z)
    }

    pub fn route(&self, x: &[f64]) -> Result<RouteResult> {
        route_logits(self.logits(x)?, self.k)
    }
}

/// Top-k selection (ties to the lowest index) with softmax restricted to
/// the selected logits.
pub fn route_logits(logits: Vec<f64>, k: usize) -> Result<RouteResult> {
    let e = logits.len();
    if k == 0 || k > e {
        return domain(format!("top-k must be in 1..={e}, got {k}"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GoatError::Numeric("router logits are not finite".into()));
    }
    let mut order: Vec<usize> = (0..e).collect();
    // stable sort keeps the lower index first among equal logits
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).expect("finite logits"));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let weights = restricted_softmax(&logits, &indices);
    Ok(RouteResult {
        indices,
        weights,
        logits,
    })
}

/// Softmax over `logits[indices]`, scattered into a length-E vector.
pub fn restricted_softmax(logits: &[f64], indices: &[usize]) -> Vec<f64> {
    let max = indices
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in indices {
        w[i] = (logits[i] - max).exp();
        total += w[i];
    }
    for &i in indices {
        w[i] /= total;
    }
    w
}

/// Full softmax over all logits, max-subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let all: Vec<usize> = (0..logits.len()).collect();
    restricted_softmax(logits, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_softmax_top_two() {
        let r = route_logits(vec![2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        let e = std::f64::consts::E;
        assert!((r.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((r.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&r.weights[2..], &[0.0, 0.0]);
        assert!((r.weights[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let r = route_logits(vec![0.5; 4], 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5, 0.0, 0.0]);
        let r = route_logits(vec![0.0, 1.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 3]);
    }

    #[test]
    fn k_equals_e_is_full_softmax() {
        let z = vec![0.3, -1.2, 2.0];
        let r = route_logits(z.clone(), 3).unwrap();
        let full = softmax(&z);
        for (a, b) in r.weights.iter().zip(&full) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let r = route_logits(vec![1000.0, 999.0, -5.0], 2).unwrap();
        assert!(r.weights.iter().all(|w| w.is_finite()));
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            route_logits(vec![f64::NAN, 0.0], 1),
            Err(GoatError::Numeric(_))
        ));
        assert!(route_logits(vec![0.0, 1.0], 3).is_err());
        assert!(Router::new(Matrix::zeros(2, 3), 0).is_err());
        let router = Router::new(Matrix::zeros(2, 3), 1).unwrap();
        assert!(router.route(&[f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(router.route(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn router_uses_input_dimension() {
        let mut rng = Rng::new(1);
        let router = Router::random(4, 6, 2, &mut rng).unwrap();
        let r = router.route(&rng.normal_vec(6, 1.0)).unwrap();
        assert_eq!(r.experts(), 4);
        assert_eq!(r.indices.len(), 2);
        assert!(r.is_selected(r.indices[0]));
    }
}
