use serde::{Deserialize, Serialize};

use crate::error::{domain, GoatError, Result};
use crate::moe::balance::BalanceContext;
use crate::moe::router::{restricted_softmax, RouteResult, Router};
use crate::moe::Variant;
use crate::numkit::{dot, Matrix};
use crate::svdseg::{ExpertPair, SegmentSpec, SegmentStrategy};

/// Bookkeeping carried alongside the parameters (for snapshots/reports).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub variant: Variant,
    pub strategy: Option<SegmentStrategy>,
    pub rank: usize,
    pub seed: u64,
    pub segments: Vec<SegmentSpec>,
}

/// Mixture of low-rank experts on top of a frozen base weight:
/// `y = w_base·x + Σ_{i∈Ω_k} wⁱ(x)·sᵢ·bⁱ(aⁱx)`.
#[derive(Clone, Debug)]
pub struct GoatLayer {
    pub w_base: Matrix,
    pub experts: Vec<ExpertPair>,
    pub router: Router,
    /// Per-expert scaling; all equal except for GOAT-s.
    pub scales: Vec<f64>,
    pub rho: f64,
    pub balance_coeff: f64,
    pub meta: LayerMeta,
}

/// Gradients of one token's loss with respect to every trainable block.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub g_b: Vec<Matrix>,
    pub g_a: Vec<Matrix>,
    pub g_wz: Matrix,
    /// Unscaled balance loss share of this token (`balance_coeff` not applied).
    pub balance_loss: f64,
}

impl LayerGrads {
    pub fn zeros_like(layer: &GoatLayer) -> Self {
        Self {
            g_b: layer
                .experts
                .iter()
                .map(|p| Matrix::zeros(p.b.rows(), p.b.cols()))
                .collect(),
            g_a: layer
                .experts
                .iter()
                .map(|p| Matrix::zeros(p.a.rows(), p.a.cols()))
                .collect(),
            g_wz: Matrix::zeros(layer.router.wz.rows(), layer.router.wz.cols()),
            balance_loss: 0.0,
        }
    }

    /// `self += alpha · other`.
    pub fn accumulate(&mut self, alpha: f64, other: &LayerGrads) -> Result<()> {
        for (x, y) in self.g_b.iter_mut().zip(&other.g_b) {
            x.add_scaled(alpha, y)?;
        }
        for (x, y) in self.g_a.iter_mut().zip(&other.g_a) {
            x.add_scaled(alpha, y)?;
        }
        self.g_wz.add_scaled(alpha, &other.g_wz)?;
        self.balance_loss += alpha * other.balance_loss;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.g_b.iter().chain(&self.g_a).all(Matrix::is_finite)
            && self.g_wz.is_finite()
            && self.balance_loss.is_finite()
    }
}

/// Router gradient of one token, added into `g_wz`.
///
/// `contrib[i]` is `∂ℓ/∂wⁱ` (the expert's output dotted with `g_y`). The
/// restricted softmax gives `∂ℓ/∂z_j = w_j·(c_j − Σ wⁱcᵢ)` on the selected
/// set, and the balance loss adds `coeff·∂L_b/∂z_j` on every row. Returns the
/// token's unscaled balance loss share.
pub fn router_backward(
    x: &[f64],
    route: &RouteResult,
    contrib: &[f64],
    ctx: &BalanceContext,
    balance_coeff: f64,
    g_wz: &mut Matrix,
) -> f64 {
    let mixed: f64 = route
        .indices
        .iter()
        .map(|&i| route.weights[i] * contrib[i])
        .sum();
    let mut dz = vec![0.0; route.experts()];
    for &j in &route.indices {
        dz[j] = route.weights[j] * (contrib[j] - mixed);
    }
    if balance_coeff != 0.0 {
        for (d, b) in dz.iter_mut().zip(ctx.logit_grad(&route.logits)) {
            *d += balance_coeff * b;
        }
    }
    for (j, &d) in dz.iter().enumerate() {
        if d != 0.0 {
            for (g, &xv) in g_wz.row_mut(j).iter_mut().zip(x) {
                *g += d * xv;
            }
        }
    }
    ctx.token_loss(&route.logits)
}

impl GoatLayer {
    pub fn new(
        w_base: Matrix,
        experts: Vec<ExpertPair>,
        router: Router,
        scales: Vec<f64>,
        rho: f64,
        balance_coeff: f64,
        meta: LayerMeta,
    ) -> Result<Self> {
        let (m, n) = w_base.shape();
        if experts.is_empty() {
            return domain("a layer needs at least one expert");
        }
        if experts.len() != router.experts() || experts.len() != scales.len() {
            return domain(format!(
                "{} experts, {} router rows, {} scales",
                experts.len(),
                router.experts(),
                scales.len()
            ));
        }
        for p in &experts {
            if p.out_in() != (m, n) {
                return Err(GoatError::Shape {
                    op: "expert vs base weight",
                    left: p.out_in(),
                    right: (m, n),
                });
            }
        }
        if router.input_dim() != n {
            return Err(GoatError::Shape {
                op: "router vs base weight",
                left: router.wz.shape(),
                right: (m, n),
            });
        }
        if scales.iter().any(|s| !s.is_finite()) || !rho.is_finite() || rho <= 0.0 {
            return domain("scales must be finite and rho positive");
        }
        Ok(Self {
            w_base,
            experts,
            router,
            scales,
            rho,
            balance_coeff,
            meta,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.router.k
    }

    /// `(m, n)`: output and input dimension.
    pub fn shape(&self) -> (usize, usize) {
        self.w_base.shape()
    }

    pub fn route(&self, x: &[f64]) -> Result<RouteResult> {
        self.router.route(x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, RouteResult)> {
        let route = self.route(x)?;
        let y = self.mix(x, &route)?;
        Ok((y, route))
    }

    /// Forward pass with the expert set frozen to `indices`; the weights are
    /// still the restricted softmax of the current logits.
    pub fn forward_fixed(&self, x: &[f64], indices: &[usize]) -> Result<(Vec<f64>, RouteResult)> {
        let logits = self.router.logits(x)?;
        if indices.iter().any(|&i| i >= self.num_experts()) {
            return domain("selected expert index out of range");
        }
        let mut indices = indices.to_vec();
        indices.sort_unstable();
        let weights = restricted_softmax(&logits, &indices);
        let route = RouteResult {
            indices,
            weights,
            logits,
        };
        let y = self.mix(x, &route)?;
        Ok((y, route))
    }

    fn mix(&self, x: &[f64], route: &RouteResult) -> Result<Vec<f64>> {
        let mut y = self.w_base.matvec(x)?;
        for &i in &route.indices {
            let p = &self.experts[i];
            let ax = p.a.matvec(x)?;
            let bax = p.b.matvec(&ax)?;
            let c = route.weights[i] * self.scales[i];
            for (yo, v) in y.iter_mut().zip(bax) {
                *yo += c * v;
            }
        }
        Ok(y)
    }

    /// Backward pass for one token with a single-token balance context.
    pub fn backward(&self, x: &[f64], route: &RouteResult, g_y: &[f64]) -> Result<LayerGrads> {
        let ctx = BalanceContext::single(route, self.k());
        self.backward_with(x, route, g_y, &ctx)
    }

    /// Backward pass for one token. The top-k set is held fixed; the router
    /// gradient flows through the restricted softmax and, scaled by
    /// `balance_coeff`, through `P_i` of the balance loss.
    pub fn backward_with(
        &self,
        x: &[f64],
        route: &RouteResult,
        g_y: &[f64],
        ctx: &BalanceContext,
    ) -> Result<LayerGrads> {
        let (m, n) = self.shape();
        if x.len() != n || g_y.len() != m {
            return Err(GoatError::Shape {
                op: "backward",
                left: (g_y.len(), x.len()),
                right: (m, n),
            });
        }
        let logits = self.router.logits(x)?;
        let stale = logits.len() != route.logits.len()
            || logits
                .iter()
                .zip(&route.logits)
                .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs()));
        if stale {
            return Err(GoatError::Contract(
                "route was not produced by this layer on this input".into(),
            ));
        }

        let mut grads = LayerGrads::zeros_like(self);
        let mut contrib = vec![0.0; self.num_experts()];
        for &i in &route.indices {
            let p = &self.experts[i];
            let s = self.scales[i];
            let w = route.weights[i];
            let ax = p.a.matvec(x)?;
            let btg = p.b.t_matvec(g_y)?;
            grads.g_b[i].add_outer(w * s, g_y, &ax)?;
            grads.g_a[i].add_outer(w * s, &btg, x)?;
            contrib[i] = s * dot(&btg, &ax);
        }
        grads.balance_loss =
            router_backward(x, route, &contrib, ctx, self.balance_coeff, &mut grads.g_wz);
        Ok(grads)
    }

    /// Plain SGD on experts and router.
    pub fn apply_sgd(&mut self, grads: &LayerGrads, lr: f64) -> Result<()> {
        self.apply_sgd_with(grads, lr, lr)
    }

    /// SGD with separate rates for the experts and the router.
    pub fn apply_sgd_with(&mut self, grads: &LayerGrads, lr: f64, lr_router: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(GoatError::Numeric("non-finite gradient".into()));
        }
        for (p, (gb, ga)) in self
            .experts
            .iter_mut()
            .zip(grads.g_b.iter().zip(&grads.g_a))
        {
            p.b.add_scaled(-lr, gb)?;
            p.a.add_scaled(-lr, ga)?;
        }
        if lr_router != 0.0 {
            self.router.wz.add_scaled(-lr_router, &grads.g_wz)?;
        }
        Ok(())
    }

    /// Dense weight realised by expert `i` alone: `w_base + sᵢ·bⁱaⁱ`.
    pub fn expert_weight(&self, i: usize) -> Matrix {
        let mut w = self.w_base.clone();
        w.add_scaled(self.scales[i], &self.experts[i].product())
            .expect("expert shapes checked at construction");
        w
    }

    /// Router-averaged weight `w_base + (1/E)Σ sᵢ·bⁱaⁱ`.
    pub fn expected_weight(&self) -> Matrix {
        let mut w = self.w_base.clone();
        let e = self.num_experts() as f64;
        for (p, s) in self.experts.iter().zip(&self.scales) {
            w.add_scaled(s / e, &p.product()).expect("shapes checked");
        }
        w
    }

    /// Weight realised for one token: `w_base + Σ wⁱ·sᵢ·bⁱaⁱ`.
    pub fn routed_weight(&self, route: &RouteResult) -> Matrix {
        let mut w = self.w_base.clone();
        for &i in &route.indices {
            w.add_scaled(
                route.weights[i] * self.scales[i],
                &self.experts[i].product(),
            )
            .expect("shapes checked");
        }
        w
    }

    /// `‖expected_weight − W₀‖_F`.
    pub fn alignment_error(&self, w0: &Matrix) -> Result<f64> {
        Ok(self.expected_weight().sub(w0)?.frobenius_norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{build_goat_layer, LayerConfig};
    use crate::numkit::{finite_diff_grad, Rng};

    fn fixture(seed: u64, coeff: f64) -> GoatLayer {
        let mut rng = Rng::new(seed);
        let w0 = rng.normal_matrix(6, 8, 0.5);
        let cfg = LayerConfig {
            experts: 4,
            k: 2,
            rank: 4,
            rho: 2.0,
            balance_coeff: coeff,
            ..LayerConfig::default()
        };
        let mut layer = build_goat_layer(&w0, &cfg, &mut rng).unwrap();
        // perturb so the zero-mean router and aligned experts are generic
        layer.router.wz = rng.normal_matrix(4, 8, 1.0);
        for p in &mut layer.experts {
            p.b.add_scaled(0.1, &rng.normal_matrix(6, 1, 1.0)).unwrap();
        }
        layer
    }

    #[test]
    fn zero_experts_pass_through_base() {
        let mut layer = fixture(1, 0.0);
        for p in &mut layer.experts {
            p.b = Matrix::zeros(6, 1);
        }
        let x = Rng::new(2).normal_vec(8, 1.0);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y, layer.w_base.matvec(&x).unwrap());
    }

    #[test]
    fn forward_matches_dense_mixture() {
        let layer = fixture(3, 0.0);
        let x = Rng::new(4).normal_vec(8, 1.0);
        let (y, route) = layer.forward(&x).unwrap();
        let mut oracle = vec![0.0; 6];
        for i in 0..4 {
            let yi = layer.expert_weight(i).matvec(&x).unwrap();
            for (o, v) in oracle.iter_mut().zip(yi) {
                *o += route.weights[i] * v;
            }
        }
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_expert_grads() {
        let layer = fixture(5, 0.0);
        let x = Rng::new(6).normal_vec(8, 1.0);
        let (_, route) = layer.forward(&x).unwrap();
        let g = layer.backward(&x, &route, &[0.0; 6]).unwrap();
        assert!(g.g_b.iter().chain(&g.g_a).all(|m| m.max_abs() == 0.0));
        assert_eq!(g.g_wz.max_abs(), 0.0);
    }

    #[test]
    fn stale_route_is_rejected() {
        let layer = fixture(7, 0.0);
        let mut rng = Rng::new(8);
        let x = rng.normal_vec(8, 1.0);
        let (_, route) = layer.forward(&x).unwrap();
        let other = rng.normal_vec(8, 1.0);
        assert!(matches!(
            layer.backward(&other, &route, &[1.0; 6]),
            Err(GoatError::Contract(_))
        ));
    }

    /// Scalar objective with the selection held fixed.
    fn objective(
        layer: &GoatLayer,
        x: &[f64],
        target: &[f64],
        indices: &[usize],
        ctx: &BalanceContext,
    ) -> f64 {
        let (y, route) = layer.forward_fixed(x, indices).unwrap();
        let task: f64 = y
            .iter()
            .zip(target)
            .map(|(a, b)| 0.5 * (a - b).powi(2))
            .sum();
        task + layer.balance_coeff * ctx.token_loss(&route.logits)
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let layer = fixture(100 + seed, 0.3);
            let mut rng = Rng::new(200 + seed);
            let x = rng.normal_vec(8, 1.0);
            let target = rng.normal_vec(6, 1.0);
            let (y, route) = layer.forward(&x).unwrap();
            let g_y: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
            let ctx = BalanceContext::single(&route, layer.k());
            let grads = layer.backward_with(&x, &route, &g_y, &ctx).unwrap();
            let sel = route.indices.clone();

            for i in 0..layer.num_experts() {
                let fd_b = finite_diff_grad(
                    |b| {
                        let mut l = layer.clone();
                        l.experts[i].b = b.clone();
                        objective(&l, &x, &target, &sel, &ctx)
                    },
                    &layer.experts[i].b,
                    1e-5,
                )
                .unwrap();
                assert!(rel_err(&grads.g_b[i], &fd_b) < 1e-5, "g_b[{i}]");
                let fd_a = finite_diff_grad(
                    |a| {
                        let mut l = layer.clone();
                        l.experts[i].a = a.clone();
                        objective(&l, &x, &target, &sel, &ctx)
                    },
                    &layer.experts[i].a,
                    1e-5,
                )
                .unwrap();
                assert!(rel_err(&grads.g_a[i], &fd_a) < 1e-5, "g_a[{i}]");
            }
            let fd_wz = finite_diff_grad(
                |wz| {
                    let mut l = layer.clone();
                    l.router.wz = wz.clone();
                    objective(&l, &x, &target, &sel, &ctx)
                },
                &layer.router.wz,
                1e-5,
            )
            .unwrap();
            assert!(rel_err(&grads.g_wz, &fd_wz) < 1e-5, "g_wz");
        }
    }

    #[test]
    fn single_expert_closed_form() {
        let mut rng = Rng::new(11);
        let b = rng.normal_matrix(3, 2, 1.0);
        let a = rng.normal_matrix(2, 4, 1.0);
        let pair =
            ExpertPair::new(b.clone(), a.clone(), crate::svdseg::ExpertSource::ZeroInit).unwrap();
        let meta = LayerMeta {
            variant: Variant::Goat,
            strategy: None,
            rank: 2,
            seed: 0,
            segments: vec![],
        };
        let router = Router::new(Matrix::zeros(1, 4), 1).unwrap();
        let layer = GoatLayer::new(
            Matrix::zeros(3, 4),
            vec![pair],
            router,
            vec![1.0],
            1.0,
            0.0,
            meta,
        )
        .unwrap();
        let x = rng.normal_vec(4, 1.0);
        let g_y = rng.normal_vec(3, 1.0);
        let (_, route) = layer.forward(&x).unwrap();
        let grads = layer.backward(&x, &route, &g_y).unwrap();
        let gx = Matrix::outer(&g_y, &x);
        let want_b = gx.matmul(&a.transpose()).unwrap();
        let want_a = b.transpose().matmul(&gx).unwrap();
        assert!(grads.g_b[0].sub(&want_b).unwrap().max_abs() < 1e-12);
        assert!(grads.g_a[0].sub(&want_a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut layer = fixture(9, 0.0);
        let mut rng = Rng::new(10);
        let x = rng.normal_vec(8, 1.0);
        let target = rng.normal_vec(6, 1.0);
        let loss = |l: &GoatLayer| {
            let (y, _) = l.forward(&x).unwrap();
            y.iter()
                .zip(&target)
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum::<f64>()
        };
        let before = loss(&layer);
        let (y, route) = layer.forward(&x).unwrap();
        let g_y: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let grads = layer.backward(&x, &route, &g_y).unwrap();
        layer.apply_sgd(&grads, 1e-3).unwrap();
        assert!(loss(&layer) < before);
    }
}
