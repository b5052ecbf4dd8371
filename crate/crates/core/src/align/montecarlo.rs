use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::moe::{route_logits, theoretical_scale, GoatLayer};
use crate::numkit::{kaiming_uniform, Matrix, Rng};
use crate::svdseg::ExpertPair;

pub const MIN_ROUTER_TRIALS: usize = 10_000;
pub const MIN_SCALE_TRIALS: usize = 1_000;

/// Distribution of the i.i.d. router logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitDist {
    Normal,
    Uniform,
}

impl LogitDist {
    fn draw(self, rng: &mut Rng) -> f64 {
        match self {
            Self::Normal => rng.standard_normal(),
            Self::Uniform => rng.uniform(0.0, 1.0),
        }
    }
}

/// Per-expert sample moments of the routing weight `wⁱ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub experts: usize,
    pub k: usize,
    pub trials: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Standard error of each mean.
    pub std_err: Vec<f64>,
}

impl RouterStats {
    pub fn expected_mean(&self) -> f64 {
        1.0 / self.experts as f64
    }

    /// Closed form `(E − k) / (k·E²)`.
    pub fn expected_var(&self) -> f64 {
        let (e, k) = (self.experts as f64, self.k as f64);
        (e - k) / (k * e * e)
    }

    /// Largest `|mean − 1/E| / SE` over experts (0 when SE is 0 and the mean is exact).
    pub fn max_mean_z(&self) -> f64 {
        let target = self.expected_mean();
        self.mean
            .iter()
            .zip(&self.std_err)
            .map(|(m, se)| {
                let d = (m - target).abs();
                if *se > 0.0 {
                    d / se
                } else if d <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative variance error; absolute when the closed form is 0.
    pub fn max_var_rel_err(&self) -> f64 {
        let target = self.expected_var();
        self.var
            .iter()
            .map(|v| {
                if target > 0.0 {
                    (v - target).abs() / target
                } else {
                    v.abs()
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn mean_var(&self) -> f64 {
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }
}

pub fn verify_router_stats(
    experts: usize,
    k: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<RouterStats> {
    verify_router_stats_with(experts, k, trials, LogitDist::Normal, rng)
}

/// Route `trials` i.i.d. logit vectors and collect routing-weight moments.
pub fn verify_router_stats_with(
    experts: usize,
    k: usize,
    trials: usize,
    dist: LogitDist,
    rng: &mut Rng,
) -> Result<RouterStats> {
    if experts == 0 || k == 0 || k > experts {
        return domain(format!("need 1 <= k <= E, got E={experts}, k={k}"));
    }
    if trials < MIN_ROUTER_TRIALS {
        return domain(format!(
            "router statistics need at least {MIN_ROUTER_TRIALS} trials"
        ));
    }
    let mut sum = vec![0.0; experts];
    let mut sum_sq = vec![0.0; experts];
    for _ in 0..trials {
        let z: Vec<f64> = (0..experts).map(|_| dist.draw(rng)).collect();
        let r = route_logits(z, k)?;
        for &i in &r.indices {
            sum[i] += r.weights[i];
            sum_sq[i] += r.weights[i] * r.weights[i];
        }
    }
    let t = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let var: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q - t * m * m) / (t - 1.0)).max(0.0))
        .collect();
    let std_err = var.iter().map(|v| (v / t).sqrt()).collect();
    Ok(RouterStats {
        experts,
        k,
        trials,
        mean,
        var,
        std_err,
    })
}

/// How closely a Kaiming-initialised `A` realises `E[AᵀA] = (r/3n)·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientScaleReport {
    pub n: usize,
    pub r: usize,
    pub trials: usize,
    pub scale: f64,
    /// `‖mean(AᵀA) − (r/3n)I‖_F / ‖(r/3n)I‖_F`.
    pub relative_deviation: f64,
    /// `‖mean(s²·g·AᵀA) − η·g‖_F / ‖η·g‖_F` for a fixed random `g`.
    pub end_to_end: f64,
    /// Largest off-diagonal `|mean| / SE`.
    pub offdiag_max_z: f64,
    pub offdiag_beyond_3se: usize,
    pub offdiag_count: usize,
}

impl GradientScaleReport {
    /// Number of off-diagonal entries expected beyond 3 SE by chance
    /// (two-sided normal tail 0.0027).
    pub fn expected_beyond_3se(&self) -> f64 {
        0.0027 * self.offdiag_count as f64
    }
}

pub fn verify_expected_gradient_scale(
    n: usize,
    r: usize,
    eta: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<GradientScaleReport> {
    if n == 0 || r == 0 {
        return domain("n and r must be at least 1");
    }
    if trials < MIN_SCALE_TRIALS {
        return domain(format!(
            "gradient scale check needs at least {MIN_SCALE_TRIALS} trials"
        ));
    }
    let s = theoretical_scale(n, eta, r as f64)?;
    let g = rng.split(0).normal_matrix(n, n, 1.0);
    let mut sum = Matrix::zeros(n, n);
    let mut sum_sq = Matrix::zeros(n, n);
    for _ in 0..trials {
        let a = kaiming_uniform(rng, r, n, n)?;
        let gram = a.transpose().matmul(&a)?;
        sum.add_scaled(1.0, &gram)?;
        for (q, v) in sum_sq.data_mut().iter_mut().zip(gram.data()) {
            *q += v * v;
        }
    }
    let t = trials as f64;
    let mean = sum.scale(1.0 / t);
    let target = r as f64 / (3.0 * n as f64);
    let ideal = Matrix::identity(n).scale(target);
    let relative_deviation = mean.sub(&ideal)?.frobenius_norm() / ideal.frobenius_norm();

    let step = g.matmul(&mean)?.scale(s * s);
    let end_to_end = step.sub(&g.scale(eta))?.frobenius_norm() / g.scale(eta).frobenius_norm();

    let mut offdiag_max_z = 0.0f64;
    let mut beyond = 0;
    for i in 0..n {
        for j in i + 1..n {
            let m = mean.get(i, j);
            let var = ((sum_sq.get(i, j) - t * m * m) / (t - 1.0)).max(0.0);
            let se = (var / t).sqrt();
            let z = if se > 0.0 { m.abs() / se } else { 0.0 };
            offdiag_max_z = offdiag_max_z.max(z);
            if z > 3.0 {
                beyond += 1;
            }
        }
    }
    Ok(GradientScaleReport {
        n,
        r,
        trials,
        scale: s,
        relative_deviation,
        end_to_end,
        offdiag_max_z,
        offdiag_beyond_3se: beyond,
        offdiag_count: n * (n - 1) / 2,
    })
}

/// Monte-Carlo objective `J(W) = mean_x ‖W − Σᵢ wⁱ(x)·sᵢ·bⁱaⁱ‖²_F` at the
/// closed-form residual and at random perturbations of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WResReport {
    pub trials: usize,
    pub j_closed_form: f64,
    pub j_perturbed: Vec<f64>,
    /// `max_j (J(W⁺) − J(W⁺ + δ_j))`; non-positive when `W⁺` beats every
    /// perturbation.
    pub max_improvement: f64,
    /// `‖mean_x Σ wⁱ sᵢ bⁱaⁱ − W⁺‖_F`.
    pub sample_mean_gap: f64,
    /// Standard error of that sample mean, `sqrt(J(mean)/T)`.
    pub sample_mean_se: f64,
}

/// Logits are i.i.d. standard normal; `perturbations` directions of norm
/// `rel_norm·‖W⁺‖_F` are drawn from `rng`.
pub fn verify_w_res_optimality(
    experts: &[ExpertPair],
    scales: &[f64],
    k: usize,
    trials: usize,
    perturbations: usize,
    rel_norm: f64,
    rng: &mut Rng,
) -> Result<WResReport> {
    let e = experts.len();
    if e == 0 || scales.len() != e || k == 0 || k > e {
        return domain("need matching experts/scales and 1 <= k <= E");
    }
    if trials < MIN_ROUTER_TRIALS {
        return domain(format!(
            "residual check needs at least {MIN_ROUTER_TRIALS} trials"
        ));
    }
    let prods: Vec<Matrix> = experts
        .iter()
        .zip(scales)
        .map(|(p, s)| p.product().scale(*s))
        .collect();
    let mut gram = vec![vec![0.0; e]; e];
    for i in 0..e {
        for j in 0..=i {
            gram[i][j] = prods[i].inner(&prods[j])?;
            gram[j][i] = gram[i][j];
        }
    }
    let mut w_res = Matrix::zeros(prods[0].rows(), prods[0].cols());
    for p in &prods {
        w_res.add_scaled(1.0 / e as f64, p)?;
    }

    let mut logit_rng = rng.split(1);
    let mut mean_w = vec![0.0; e];
    let mut second = vec![vec![0.0; e]; e];
    for _ in 0..trials {
        let z: Vec<f64> = (0..e).map(|_| logit_rng.standard_normal()).collect();
        let r = route_logits(z, k)?;
        for &i in &r.indices {
            mean_w[i] += r.weights[i];
            for &j in &r.indices {
                second[i][j] += r.weights[i] * r.weights[j];
            }
        }
    }
    let t = trials as f64;
    mean_w.iter_mut().for_each(|v| *v /= t);
    let mut sample_mean = Matrix::zeros(w_res.rows(), w_res.cols());
    for (p, w) in prods.iter().zip(&mean_w) {
        sample_mean.add_scaled(*w, p)?;
    }
    // mean‖M_x‖² − ‖M̄‖², i.e. J at the sample mean
    let mut spread = 0.0;
    for i in 0..e {
        for j in 0..e {
            spread += second[i][j] / t * gram[i][j];
        }
    }
    spread -= sample_mean.frobenius_norm_sq();
    let spread = spread.max(0.0);
    let objective =
        |w: &Matrix| -> Result<f64> { Ok(w.sub(&sample_mean)?.frobenius_norm_sq() + spread) };

    let j_closed_form = objective(&w_res)?;
    let radius = rel_norm * w_res.frobenius_norm();
    let mut dir_rng = rng.split(2);
    let mut j_perturbed = Vec::with_capacity(perturbations);
    for _ in 0..perturbations {
        let d = dir_rng.normal_matrix(w_res.rows(), w_res.cols(), 1.0);
        let norm = d.frobenius_norm();
        let mut w = w_res.clone();
        w.add_scaled(radius / norm, &d)?;
        j_perturbed.push(objective(&w)?);
    }
    let max_improvement = j_perturbed
        .iter()
        .map(|j| j_closed_form - j)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(WResReport {
        trials,
        j_closed_form,
        j_perturbed,
        max_improvement,
        sample_mean_gap: sample_mean.sub(&w_res)?.frobenius_norm(),
        sample_mean_se: (spread / t).sqrt(),
    })
}

/// Sample mean and variance over random inputs `x ~ N(0, I)` of
/// `‖Σᵢ wⁱ(x)·sᵢ·bⁱaⁱ − (1/E)Σᵢ sᵢ·bⁱaⁱ‖_F`.
pub fn deviation_moments(layer: &GoatLayer, trials: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if trials < 2 {
        return domain("need at least two inputs");
    }
    let e = layer.num_experts();
    let prods: Vec<Matrix> = layer
        .experts
        .iter()
        .zip(&layer.scales)
        .map(|(p, s)| p.product().scale(*s))
        .collect();
    let (_, n) = layer.shape();
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let route = layer.route(&rng.normal_vec(n, 1.0))?;
        let mut dev = Matrix::zeros(prods[0].rows(), prods[0].cols());
        for (i, p) in prods.iter().enumerate() {
            dev.add_scaled(route.weights[i] - 1.0 / e as f64, p)?;
        }
        values.push(dev.frobenius_norm());
    }
    let t = trials as f64;
    let mean = values.iter().sum::<f64>() / t;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{build_goat_layer, LayerConfig};
    use crate::svdseg::ExpertSource;

    #[test]
    fn single_expert_weight_is_constant() {
        let s = verify_router_stats(1, 1, 10_000, &mut Rng::new(1)).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.var, vec![0.0]);
        assert_eq!(s.max_mean_z(), 0.0);
    }

    #[test]
    fn top_one_matches_closed_form() {
        // k = 1 weights are indicators, so the closed form is exact
        let s = verify_router_stats(4, 1, 40_000, &mut Rng::new(2)).unwrap();
        assert!(s.max_mean_z() < 4.0);
        assert!(s.max_var_rel_err() < 0.03, "{:?}", s.var);
    }

    #[test]
    fn router_stats_reject_bad_arguments() {
        assert!(verify_router_stats(4, 5, 10_000, &mut Rng::new(0)).is_err());
        assert!(verify_router_stats(4, 2, 10, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn uniform_and_normal_means_agree() {
        for dist in [LogitDist::Normal, LogitDist::Uniform] {
            let s = verify_router_stats_with(8, 2, 20_000, dist, &mut Rng::new(3)).unwrap();
            assert!(s.max_mean_z() < 4.5, "{dist:?}");
        }
    }

    #[test]
    fn gradient_scale_end_to_end() {
        let rep = verify_expected_gradient_scale(16, 8, 1.0, 4_000, &mut Rng::new(4)).unwrap();
        assert!(rep.relative_deviation < 0.05, "{rep:?}");
        assert!(rep.end_to_end < 0.05, "{rep:?}");
        let bound = rep.expected_beyond_3se() + 4.0 * rep.expected_beyond_3se().sqrt() + 1.0;
        assert!((rep.offdiag_beyond_3se as f64) <= bound, "{rep:?}");
    }

    fn pair(m: &Matrix) -> ExpertPair {
        ExpertPair::new(
            m.clone(),
            Matrix::identity(m.cols()),
            ExpertSource::ZeroInit,
        )
        .unwrap()
    }

    #[test]
    fn identical_experts_have_zero_objective() {
        let m = Rng::new(5).normal_matrix(3, 3, 1.0);
        let experts = vec![pair(&m); 4];
        let rep = verify_w_res_optimality(&experts, &[2.0; 4], 2, 10_000, 5, 0.1, &mut Rng::new(6))
            .unwrap();
        assert!(rep.j_closed_form < 1e-20);
        assert!(rep.max_improvement < 0.0);
    }

    #[test]
    fn closed_form_residual_is_a_minimiser() {
        let mut rng = Rng::new(7);
        let experts: Vec<ExpertPair> = (0..4)
            .map(|_| pair(&rng.normal_matrix(3, 3, 1.0)))
            .collect();
        let rep =
            verify_w_res_optimality(&experts, &[1.5; 4], 2, 20_000, 20, 0.1, &mut rng).unwrap();
        assert!(rep.max_improvement < 0.0, "{rep:?}");
        assert!(rep.sample_mean_gap <= 3.0 * rep.sample_mean_se, "{rep:?}");
    }

    #[test]
    fn deviation_shrinks_with_damping() {
        let w0 = Rng::new(8).normal_matrix(8, 8, 1.0);
        let var = |rho: f64| {
            let cfg = LayerConfig {
                experts: 4,
                rank: 8,
                rho,
                ..LayerConfig::default()
            };
            let layer = build_goat_layer(&w0, &cfg, &mut Rng::new(1)).unwrap();
            deviation_moments(&layer, 2_000, &mut Rng::new(2))
                .unwrap()
                .1
        };
        let (v1, v10) = (var(1.0), var(10.0));
        assert!(v10 < v1);
        assert!((v10 / v1 - 0.01).abs() < 1e-9);
    }
}
