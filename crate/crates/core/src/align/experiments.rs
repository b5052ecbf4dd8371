use serde::{Deserialize, Serialize};

use crate::align::tasks::SyntheticTask;
use crate::align::train::{run_experiment, TrainConfig};
use crate::error::{domain, Result};
use crate::moe::{build_goat_layer, GoatLayer, LayerConfig, LayerMeta, Router, Variant};
use crate::numkit::{Matrix, Rng};
use crate::svdseg::{ExpertPair, ExpertSource, SegmentStrategy};

/// Layer whose every expert is `b = c·I`, `a = 0`, with
/// `s = √(lr_ratio)/c`. Then `g̃ = s²c²·g + O(1/c²)`, so with
/// `lr_ratio = η_F/η_L` each expert tracks full fine-tuning to `O(1/c²)`.
pub fn exact_alignment_layer(
    w0: &Matrix,
    experts: usize,
    k: usize,
    c: f64,
    lr_ratio: f64,
    rng: &mut Rng,
) -> Result<GoatLayer> {
    exact_alignment_layer_with(w0, &vec![c; experts], k, lr_ratio, rng)
}

/// As [`exact_alignment_layer`] with one magnitude `cᵢ` per expert, hence
/// per-expert scales `sᵢ = √(lr_ratio)/cᵢ`.
pub fn exact_alignment_layer_with(
    w0: &Matrix,
    cs: &[f64],
    k: usize,
    lr_ratio: f64,
    rng: &mut Rng,
) -> Result<GoatLayer> {
    let (m, n) = w0.shape();
    let experts = cs.len();
    if m > n {
        return domain("the constructed instance needs m <= n");
    }
    if experts == 0 || !(cs.iter().all(|c| *c > 0.0) && lr_ratio > 0.0) {
        return domain("need at least one expert; c and lr_ratio must be positive");
    }
    let pairs = cs
        .iter()
        .map(|&c| {
            ExpertPair::new(
                Matrix::identity(m).scale(c),
                Matrix::zeros(m, n),
                ExpertSource::ZeroInit,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<f64> = cs.iter().map(|c| lr_ratio.sqrt() / c).collect();
    let router = if experts == 1 {
        Router::new(Matrix::zeros(1, n), 1)?
    } else {
        Router::random(experts, n, k, &mut rng.split(1))?
    };
    let meta = LayerMeta {
        variant: if cs.windows(2).all(|w| w[0] == w[1]) {
            Variant::Goat
        } else {
            Variant::GoatS
        },
        strategy: None,
        rank: m * experts,
        seed: rng.seed(),
        segments: vec![],
    };
    GoatLayer::new(w0.clone(), pairs, router, scales, 1.0, 1e-3, meta)
}

/// Small random layer with generic (non-aligned) parameters for gradient
/// checks. Cycles through variants (unless `variant` is given) and routing
/// widths by `index`.
pub fn gradient_fixture(
    index: usize,
    seed: u64,
    variant: Option<Variant>,
) -> Result<(GoatLayer, Vec<f64>, Vec<f64>)> {
    let mut rng = Rng::new(seed).split(index as u64);
    let m = 3 + rng.below(6);
    let n = 3 + rng.below(6);
    let h = m.min(n);
    let experts = [1, 2, 3][index % 3].min(h);
    let k = 1 + rng.below(experts);
    let variant = variant.unwrap_or([Variant::Goat, Variant::GoatS, Variant::ZeroMoE][index % 3]);
    if variant.is_single() {
        return domain("gradient fixtures are mixture layers");
    }
    let strategy = SegmentStrategy::ALL[index % 4];
    let cfg = LayerConfig {
        experts,
        k,
        rank: experts,
        variant,
        strategy,
        rho: 1.0 + rng.uniform(0.0, 9.0),
        balance_coeff: 0.1,
        ..LayerConfig::default()
    };
    let w0 = rng.normal_matrix(m, n, 1.0);
    let mut layer = build_goat_layer(&w0, &cfg, &mut rng)?;
    layer.router.wz = rng.normal_matrix(experts, n, 1.0);
    for p in &mut layer.experts {
        let (pr, pc) = p.b.shape();
        p.b.add_scaled(0.3, &rng.normal_matrix(pr, pc, 1.0))?;
    }
    let x = rng.normal_vec(n, 1.0);
    let target = rng.normal_vec(m, 1.0);
    Ok((layer, x, target))
}

/// Desk-scale teacher-student setup shared by the convergence and load
/// experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub dim: usize,
    pub rank: usize,
    pub experts: usize,
    pub k: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub perturb_rank: usize,
    pub perturb_scale: f64,
    pub noise_std: f64,
    pub checkpoint: usize,
    pub eval_size: usize,
    pub balance_coeff: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            rank: 8,
            experts: 8,
            k: 2,
            steps: 2000,
            batch: 16,
            lr: 5e-3,
            perturb_rank: 8,
            perturb_scale: 0.5,
            noise_std: 0.01,
            checkpoint: 200,
            eval_size: 256,
            balance_coeff: 1e-3,
        }
    }
}

impl SuiteConfig {
    fn problem(&self, seed: u64) -> Result<(Matrix, SyntheticTask)> {
        let mut rng = Rng::new(seed).split(7);
        let w0 = rng.normal_matrix(self.dim, self.dim, 1.0 / (self.dim as f64).sqrt());
        let task = SyntheticTask::teacher_student(
            &w0,
            self.perturb_rank,
            self.perturb_scale,
            self.noise_std,
            &mut rng,
        )?;
        Ok((w0, task))
    }

    fn layer(
        &self,
        w0: &Matrix,
        variant: Variant,
        balance_coeff: f64,
        seed: u64,
    ) -> Result<GoatLayer> {
        let cfg = LayerConfig {
            experts: self.experts,
            k: self.k,
            rank: self.rank,
            variant,
            balance_coeff,
            ..LayerConfig::default()
        };
        build_goat_layer(w0, &cfg, &mut Rng::new(seed).split(8))
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            lr_ref: self.lr,
            lr_router: None,
            eval_size: self.eval_size,
            eval_every: self.checkpoint,
            timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOutcome {
    pub seed: u64,
    pub goat_checkpoint: f64,
    pub zero_checkpoint: f64,
    pub goat_final: f64,
    pub zero_final: f64,
}

/// Train GOAT and ZeroMoE layers on the same task, data and router seed;
/// compare held-out loss at the checkpoint and at the end.
pub fn convergence_comparison(cfg: &SuiteConfig, seeds: &[u64]) -> Result<Vec<ConvergenceOutcome>> {
    let train = cfg.train();
    seeds
        .iter()
        .map(|&seed| {
            let (w0, task) = cfg.problem(seed)?;
            let mut losses = Vec::new();
            for variant in [Variant::Goat, Variant::ZeroMoE] {
                let layer = cfg.layer(&w0, variant, cfg.balance_coeff, seed)?;
                let out = run_experiment(&task, layer, None, &train, &Rng::new(seed))?;
                if let Some(err) = out.error {
                    return Err(err);
                }
                let at = |step: usize| {
                    out.records
                        .iter()
                        .find(|r| r.step == step)
                        .and_then(|r| r.eval_loss)
                        .unwrap_or(f64::NAN)
                };
                losses.push((at(cfg.checkpoint.min(cfg.steps)), at(cfg.steps)));
            }
            Ok(ConvergenceOutcome {
                seed,
                goat_checkpoint: losses[0].0,
                zero_checkpoint: losses[1].0,
                goat_final: losses[0].1,
                zero_final: losses[1].1,
            })
        })
        .collect()
}

/// Per-seed largest relative deviation of an expert's routing share from
/// `1/E`, measured on `probe` fresh inputs after training a GOAT layer.
pub fn load_balance_experiment(
    cfg: &SuiteConfig,
    balance_coeff: f64,
    seeds: &[u64],
    probe: usize,
) -> Result<Vec<f64>> {
    let train = TrainConfig {
        eval_size: 0,
        ..cfg.train()
    };
    seeds
        .iter()
        .map(|&seed| {
            let (w0, task) = cfg.problem(seed)?;
            let layer = cfg.layer(&w0, Variant::Goat, balance_coeff, seed)?;
            let out = run_experiment(&task, layer, None, &train, &Rng::new(seed))?;
            if let Some(err) = out.error {
                return Err(err);
            }
            let mut rng = Rng::new(seed).split(9);
            let e = out.layer.num_experts();
            let mut counts = vec![0usize; e];
            for _ in 0..probe {
                for i in out.layer.route(&task.sample(&mut rng).x)?.indices {
                    counts[i] += 1;
                }
            }
            let total = (probe * out.layer.k()) as f64;
            Ok(counts
                .iter()
                .map(|&c| ((c as f64 / total) * e as f64 - 1.0).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
