//! Property suites: each numbered criterion runs a set of named checks and
//! reports measured against expected values. Shared by the acceptance
//! target and the `verify` command.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::align::{
    check_layer_gradients, convergence_comparison, decompose_lora_step, deviation_moments,
    equivalent_gradient, exact_alignment_layer, exact_alignment_layer_with, gradient_fixture,
    load_balance_experiment, median, run_alignment_experiment, verify_expected_gradient_scale,
    verify_router_stats, verify_w_res_optimality, Reference, SuiteConfig, SyntheticTask,
    TrainConfig,
};
use crate::costmodel::regression_table;
use crate::error::{GoatError, Result};
use crate::moe::{build_goat_layer, goat_s_scales, GoatLayer, LayerConfig, Variant};
use crate::numkit::{svd, Matrix, Rng};
use crate::svdseg::{
    best_rank_r_block, block_decompose, build_single_lora_init, SegmentStrategy, SingleLoraVariant,
};

/// One named comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub expected: String,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        passed: bool,
        measured: impl Into<String>,
        expected: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            passed,
            measured: measured.into(),
            expected: expected.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag}  {}: measured {}, expected {}",
            self.name, self.measured, self.expected
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One-line verdict with the first failing check, if any.
    pub fn summary(&self) -> String {
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let head = format!(
            "{} criterion {:>2} ({}): {passed}/{} checks in {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.checks.len(),
            self.seconds
        );
        match self.failures().next() {
            Some(c) => format!(
                "{head}; first failure {}: measured {}, expected {}",
                c.name, c.measured, c.expected
            ),
            None => head,
        }
    }
}

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "cost regression"),
    (2, "routing weight moments"),
    (3, "residual weight optimality"),
    (4, "one-step adapter decomposition"),
    (5, "scaling rule and gradient proportionality"),
    (6, "layer gradients"),
    (7, "initialization alignment"),
    (8, "trajectory alignment"),
    (9, "convergence ordering"),
    (10, "load balance"),
    (11, "leading block optimality"),
    (12, "per-expert scales"),
];

/// Wall-clock budget in seconds, where one applies.
fn budget(id: u8) -> Option<f64> {
    match id {
        1 => Some(1.0),
        2 => Some(30.0),
        3 => Some(120.0),
        8 => Some(60.0),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemmas,
    Gradients,
    Alignment,
    Cost,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["lemmas", "gradients", "alignment", "cost", "all"];

    pub fn criteria(self) -> Vec<u8> {
        match self {
            Self::Lemmas => vec![2, 3, 4, 5, 11],
            Self::Gradients => vec![6],
            Self::Alignment => vec![7, 8, 9, 10, 12],
            Self::Cost => vec![1],
            Self::All => (1..=12).collect(),
        }
    }
}

impl FromStr for Suite {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(Self::Lemmas),
            "gradients" => Ok(Self::Gradients),
            "alignment" => Ok(Self::Alignment),
            "cost" => Ok(Self::Cost),
            "all" => Ok(Self::All),
            _ => Err(GoatError::Domain(format!(
                "unknown suite {s:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

pub const DEFAULT_SEED: u64 = 20_240_917;

pub fn run_criterion(id: u8, seed: u64) -> Result<CriterionReport> {
    let title = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, t)| *t)
        .ok_or_else(|| GoatError::Domain(format!("no criterion {id}")))?;
    let rng = Rng::new(seed).split(id as u64);
    let started = Instant::now();
    let mut checks = match id {
        1 => cost_checks()?,
        2 => router_moment_checks(&rng)?,
        3 => w_res_checks(&rng)?,
        4 => step_decomposition_checks(&rng)?,
        5 => scaling_checks(&rng)?,
        6 => gradient_checks(seed, None)?,
        7 => init_alignment_checks(
            &rng,
            &[
                Variant::Goat,
                Variant::GoatS,
                Variant::ZeroMoE,
                Variant::PiSSA,
                Variant::MiLoRA,
            ],
        )?,
        8 => trajectory_checks(&rng, false)?,
        9 => convergence_checks(seed)?,
        10 => load_balance_checks(seed)?,
        11 => block_checks(&rng)?,
        _ => goat_s_checks(seed, &rng)?,
    };
    let seconds = started.elapsed().as_secs_f64();
    if let Some(limit) = budget(id) {
        checks.push(Check::new(
            "runtime",
            seconds < limit,
            format!("{seconds:.2}s"),
            format!("< {limit}s"),
        ));
    }
    Ok(CriterionReport {
        id,
        title,
        checks,
        seconds,
    })
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CriterionReport>> {
    suite
        .criteria()
        .into_iter()
        .map(|id| run_criterion(id, seed))
        .collect()
}

fn cost_checks() -> Result<Vec<Check>> {
    Ok(regression_table()?
        .into_iter()
        .map(|row| {
            Check::new(
                format!("{} {}", row.backbone, row.method),
                row.matches,
                format!("{:.4}%", row.computed),
                format!("{}%", row.shown),
            )
        })
        .collect())
}

pub const ROUTER_TRIALS: usize = 100_000;

fn router_moment_checks(rng: &Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (j, (e, k)) in [(8, 2), (8, 1), (16, 4)].into_iter().enumerate() {
        let stats = verify_router_stats(e, k, ROUTER_TRIALS, &mut rng.split(j as u64))?;
        checks.push(Check::new(
            format!("mean E={e} k={k}"),
            stats.max_mean_z() <= 3.0,
            format!("max |mean - 1/E| = {:.2} SE", stats.max_mean_z()),
            "<= 3 SE",
        ));
        checks.push(Check::new(
            format!("variance E={e} k={k}"),
            stats.max_var_rel_err() <= 0.05,
            format!(
                "mean var {:.6}, worst relative error {:.2}%",
                stats.mean_var(),
                100.0 * stats.max_var_rel_err()
            ),
            format!("{:.6} within 5%", stats.expected_var()),
        ));
    }
    Ok(checks)
}

fn w_res_checks(rng: &Rng) -> Result<Vec<Check>> {
    (0..5u64)
        .map(|j| {
            let mut r = rng.split(j);
            let w0 = r.normal_matrix(16, 16, 1.0);
            let cfg = LayerConfig {
                experts: 8,
                k: 2,
                rank: 16,
                ..LayerConfig::default()
            };
            let layer = build_goat_layer(&w0, &cfg, &mut r)?;
            let report = verify_w_res_optimality(
                &layer.experts,
                &layer.scales,
                cfg.k,
                ROUTER_TRIALS,
                20,
                0.1,
                &mut r,
            )?;
            Ok(Check::new(
                format!("expert set {j}"),
                report.max_improvement <= 0.0,
                format!(
                    "J(W+) = {:.6}, best perturbation improves by {:.3e}",
                    report.j_closed_form, report.max_improvement
                ),
                "no perturbation improves",
            ))
        })
        .collect()
}

const ETAS: [f64; 3] = [1e-2, 1e-3, 1e-4];

fn step_decomposition_checks(rng: &Rng) -> Result<Vec<Check>> {
    let mut worst_residual = 0.0f64;
    let mut worst_closed = 0.0f64;
    let mut worst_ratio = f64::INFINITY;
    for f in 0..50u64 {
        let mut r = rng.split(f);
        let m = 2 + r.below(9);
        let n = 2 + r.below(9);
        let rank = 1 + r.below(m.min(n));
        let b = r.normal_matrix(m, rank, 1.0);
        let a = r.normal_matrix(rank, n, 1.0);
        let g = r.normal_matrix(m, n, 1.0);
        let s = r.uniform(0.5, 4.0);
        let scale = s * b.frobenius_norm() * a.frobenius_norm() + 1.0;
        let mut per_eta = Vec::new();
        for eta in ETAS {
            let d = decompose_lora_step(&b, &a, &g, s, eta)?;
            worst_residual = worst_residual.max(d.residual / scale);
            // s·dB·dA with dB = −sη·g·aᵀ, dA = −sη·bᵀ·g
            let closed = g
                .matmul(&a.transpose())?
                .matmul(&b.transpose().matmul(&g)?)?
                .scale(s.powi(3) * eta * eta);
            worst_closed = worst_closed
                .max(d.remainder.sub(&closed)?.frobenius_norm() / closed.frobenius_norm());
            per_eta.push(d.remainder.frobenius_norm() / eta);
        }
        for w in per_eta.windows(2) {
            worst_ratio = worst_ratio.min(w[0] / w[1]);
        }
    }
    Ok(vec![
        Check::new(
            "delta = -eta*g_tilde + remainder",
            worst_residual <= 1e-12,
            format!("worst residual {worst_residual:.2e} (relative)"),
            "<= 1e-12",
        ),
        Check::new(
            "remainder = s*dB*dA",
            worst_closed <= 1e-10,
            format!("worst relative difference {worst_closed:.2e}"),
            "<= 1e-10",
        ),
        Check::new(
            "remainder/eta shrink per 10x eta",
            worst_ratio >= 8.0,
            format!("smallest shrink {worst_ratio:.3}x"),
            ">= 8x",
        ),
    ])
}

fn scaling_checks(rng: &Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for r in [2usize, 4, 8] {
        let report = verify_expected_gradient_scale(64, r, 1e-3, 10_000, &mut rng.split(r as u64))?;
        checks.push(Check::new(
            format!("expected equivalent gradient n=64 r={r}"),
            report.end_to_end <= 0.05,
            format!(
                "relative error {:.2}% (s = {:.4})",
                100.0 * report.end_to_end,
                report.scale
            ),
            "<= 5%",
        ));
    }
    let mut worst = 0.0f64;
    for f in 0..5u64 {
        let mut sub = rng.split(100 + f);
        let w0 = sub.normal_matrix(12, 10, 1.0);
        let g = sub.normal_matrix(12, 10, 1.0);
        let factors = svd(&w0)?;
        for variant in [SingleLoraVariant::PiSSA, SingleLoraVariant::MiLoRA] {
            let per_unit: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
                .iter()
                .map(|&s| {
                    let (pair, _) = build_single_lora_init(&factors, variant, 4, s)?;
                    Ok(equivalent_gradient(&pair.b, &pair.a, &g, s)?.frobenius_norm() / s)
                })
                .collect::<Result<_>>()?;
            for v in &per_unit {
                worst = worst.max((v / per_unit[0] - 1.0).abs());
            }
        }
    }
    checks.push(Check::new(
        "||g_tilde_0|| proportional to s (SVD init)",
        worst <= 1e-10,
        format!("worst deviation of ||g_tilde||/s {worst:.2e}"),
        "<= 1e-10",
    ));
    Ok(checks)
}

fn gradient_checks(seed: u64, variant: Option<Variant>) -> Result<Vec<Check>> {
    (0..20)
        .map(|i| {
            let (layer, x, target) = gradient_fixture(i, seed, variant)?;
            let blocks = check_layer_gradients(&layer, &x, &target)?;
            let worst = blocks
                .iter()
                .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
                .expect("every fixture has blocks");
            let (m, n) = layer.shape();
            Ok(Check::new(
                format!(
                    "fixture {i} ({} {m}x{n} E={} k={})",
                    layer.meta.variant,
                    layer.num_experts(),
                    layer.k()
                ),
                blocks.iter().all(|b| b.rel_err <= 1e-5),
                format!("worst {} relative error {:.2e}", worst.name, worst.rel_err),
                "<= 1e-5",
            ))
        })
        .collect()
}

fn layer_config(variant: Variant, strategy: SegmentStrategy, rho: f64) -> LayerConfig {
    let (experts, k) = if variant.is_single() { (1, 1) } else { (4, 2) };
    LayerConfig {
        experts,
        k,
        rank: 8,
        rho,
        strategy,
        variant,
        ..LayerConfig::default()
    }
}

fn init_alignment_checks(rng: &Rng, variants: &[Variant]) -> Result<Vec<Check>> {
    let fixtures: Vec<Matrix> = (0..10u64)
        .map(|f| {
            let mut r = rng.split(f);
            let m = 8 + r.below(7);
            let n = 8 + r.below(7);
            let std = r.uniform(0.1, 3.0);
            r.normal_matrix(m, n, std)
        })
        .collect();
    let mut checks = Vec::new();
    for &variant in variants {
        let strategies: &[SegmentStrategy] = if variant.is_single() {
            &[SegmentStrategy::Ours]
        } else {
            &SegmentStrategy::ALL
        };
        let mut worst = 0.0f64;
        for (f, w0) in fixtures.iter().enumerate() {
            for &strategy in strategies {
                let layer = build_goat_layer(
                    w0,
                    &layer_config(variant, strategy, 10.0),
                    &mut rng.split(100 + f as u64),
                )?;
                worst = worst.max(layer.alignment_error(w0)? / w0.frobenius_norm().max(1.0));
            }
        }
        checks.push(Check::new(
            format!("{variant} expected weight equals W0"),
            worst <= 1e-8,
            format!("worst relative error {worst:.2e}"),
            "<= 1e-8",
        ));
    }
    for &variant in variants
        .iter()
        .filter(|v| matches!(v, Variant::Goat | Variant::GoatS))
    {
        let mut lower = 0;
        let mut ratios = Vec::new();
        for (f, w0) in fixtures.iter().enumerate() {
            let build = |rho| {
                build_goat_layer(
                    w0,
                    &layer_config(variant, SegmentStrategy::Ours, rho),
                    &mut rng.split(100 + f as u64),
                )
            };
            let (_, var10) =
                deviation_moments(&build(10.0)?, 2_000, &mut rng.split(200 + f as u64))?;
            let (_, var1) = deviation_moments(&build(1.0)?, 2_000, &mut rng.split(200 + f as u64))?;
            if var10 < var1 {
                lower += 1;
            }
            ratios.push(var10 / var1);
        }
        checks.push(Check::new(
            format!("{variant} rho=10 lowers deviation variance"),
            lower == fixtures.len(),
            format!(
                "lower on {lower}/{} fixtures, median variance ratio {:.4}",
                fixtures.len(),
                median(&ratios)
            ),
            "strictly lower on every fixture",
        ));
    }
    Ok(checks)
}

fn alignment_task(rng: &mut Rng, dim: usize) -> Result<(Matrix, SyntheticTask)> {
    let w0 = rng.normal_matrix(dim, dim, 0.3);
    let task = SyntheticTask::teacher_student(&w0, 2, 0.5, 0.01, rng)?;
    Ok((w0, task))
}

fn trajectory_checks(rng: &Rng, per_expert_scales: bool) -> Result<Vec<Check>> {
    let steps = 100;
    let mut checks = Vec::new();
    if !per_expert_scales {
        let mut r = rng.split(1);
        let (w0, task) = alignment_task(&mut r, 6)?;
        let layer = exact_alignment_layer(&w0, 1, 1, 1e4, 2.0, &mut r)?;
        let cfg = TrainConfig {
            steps,
            lr: 0.01,
            lr_ref: 0.02,
            ..TrainConfig::default()
        };
        let report =
            run_alignment_experiment(&task, layer, Reference::dense(&w0), &cfg, &r.split(2))?;
        checks.push(Check::new(
            "constructed instance weight gap",
            report.max_weight_gap() <= 1e-6,
            format!(
                "max gap {:.2e} over {} steps",
                report.max_weight_gap(),
                steps
            ),
            "<= 1e-6",
        ));
    }
    let mut r = rng.split(3);
    let (w0, task) = alignment_task(&mut r, 5)?;
    let layer = if per_expert_scales {
        exact_alignment_layer_with(&w0, &[1e4, 3e4], 1, 1.0, &mut r)?
    } else {
        exact_alignment_layer(&w0, 2, 1, 1e4, 1.0, &mut r)?
    };
    let reference = Reference::upcycled(&w0, &layer);
    let cfg = TrainConfig {
        steps,
        lr: 0.02,
        lr_ref: 0.02,
        ..TrainConfig::default()
    };
    let report = run_alignment_experiment(&task, layer, reference, &cfg, &r.split(4))?;
    let agreeing = report
        .routing_agreement
        .iter()
        .filter(|a| **a == 1.0)
        .count();
    checks.push(Check::new(
        "upcycled instance routing",
        report.routing_always_agrees(),
        format!(
            "identical on {agreeing}/{} steps",
            report.routing_agreement.len()
        ),
        "identical at every step",
    ));
    checks.push(Check::new(
        "upcycled instance expert gap",
        report.max_expert_gap() <= 1e-6,
        format!("max gap {:.2e}", report.max_expert_gap()),
        "<= 1e-6",
    ));
    Ok(checks)
}

fn seeds_from(seed: u64) -> Vec<u64> {
    (0..5).map(|i| seed.wrapping_add(i)).collect()
}

fn convergence_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = SuiteConfig::default();
    let outcomes = convergence_comparison(&cfg, &seeds_from(seed))?;
    let goat: Vec<f64> = outcomes.iter().map(|o| o.goat_final).collect();
    let zero: Vec<f64> = outcomes.iter().map(|o| o.zero_final).collect();
    let wins = outcomes
        .iter()
        .filter(|o| o.goat_checkpoint <= o.zero_checkpoint)
        .count();
    Ok(vec![
        Check::new(
            "median final loss",
            median(&goat) <= median(&zero),
            format!("GOAT {:.4} vs ZeroMoE {:.4}", median(&goat), median(&zero)),
            "GOAT <= ZeroMoE",
        ),
        Check::new(
            format!("loss at step {}", cfg.checkpoint),
            wins >= 4,
            format!("GOAT <= ZeroMoE in {wins}/{} seeds", outcomes.len()),
            ">= 4 of 5 seeds",
        ),
    ])
}

pub const LOAD_BAND: f64 = 0.15;

fn load_balance_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = SuiteConfig::default();
    let seeds = seeds_from(seed);
    let with = load_balance_experiment(&cfg, 1e-3, &seeds, 20_000)?;
    let without = load_balance_experiment(&cfg, 0.0, &seeds, 20_000)?;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|d| format!("{:.1}%", 100.0 * d))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let worst_without = without.iter().copied().fold(0.0, f64::max);
    Ok(vec![
        Check::new(
            "coefficient 1e-3 within band",
            median(&with) <= LOAD_BAND,
            format!(
                "median deviation {:.1}% [{}]",
                100.0 * median(&with),
                fmt(&with)
            ),
            "<= 15%",
        ),
        Check::new(
            "coefficient 0 leaves band",
            worst_without > LOAD_BAND,
            format!(
                "largest deviation {:.1}% [{}]",
                100.0 * worst_without,
                fmt(&without)
            ),
            "> 15% on some seed",
        ),
    ])
}

fn block_checks(rng: &Rng) -> Result<Vec<Check>> {
    let mut leading = 0;
    let mut worst_residual = 0.0f64;
    let mut detail = String::new();
    for f in 0..20u64 {
        let mut r = rng.split(f);
        let m = 4 + r.below(9);
        let n = 4 + r.below(9);
        let h = m.min(n);
        let rank = 1 + r.below(h - 1);
        let w0 = r.normal_matrix(m, n, 1.0);
        let factors = svd(&w0)?;
        // Every contiguous band of `rank` triples, not only aligned blocks.
        let mut best = (0, f64::INFINITY);
        for start in 0..=h - rank {
            let res = w0
                .sub(&factors.reconstruct_range(start, rank)?)?
                .frobenius_norm();
            if res < best.1 - 1e-12 * w0.frobenius_norm() {
                best = (start, res);
            }
        }
        let aligned = best_rank_r_block(&block_decompose(&w0, rank)?);
        if best.0 == 0 && aligned.is_ok() {
            leading += 1;
        } else if detail.is_empty() {
            detail = format!(" (fixture {f}: best start {})", best.0);
        }
        let tail = factors.sigma[rank..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt();
        worst_residual = worst_residual.max((best.1 - tail).abs());
    }
    Ok(vec![
        Check::new(
            "leading block minimizes residual",
            leading == 20,
            format!("{leading}/20 matrices{detail}"),
            "20/20",
        ),
        Check::new(
            "residual equals spectral tail",
            worst_residual <= 1e-9,
            format!("worst difference {worst_residual:.2e}"),
            "<= 1e-9",
        ),
    ])
}

fn goat_s_checks(seed: u64, rng: &Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for f in 0..10u64 {
        let mut r = rng.split(f);
        // Geometric spectra of varying decay, including near-flat ones.
        let decay = r.uniform(0.5, 0.99);
        let top = r.uniform(0.5, 20.0);
        let sums: Vec<f64> = (0..8).map(|i| top * decay.powi(i)).collect();
        let s1 = r.uniform(0.1, 10.0);
        let scales = goat_s_scales(&sums, s1)?;
        let target = s1 * s1 * sums[0];
        for (s, sigma) in scales.iter().zip(&sums) {
            worst = worst.max((s * s * sigma - target).abs() / target);
        }
    }
    let mut layer_worst = 0.0f64;
    for f in 0..10u64 {
        let mut r = rng.split(50 + f);
        let w0 = r.normal_matrix(12, 12, 1.0);
        let layer = build_goat_layer(
            &w0,
            &layer_config(Variant::GoatS, SegmentStrategy::Ours, 10.0),
            &mut r,
        )?;
        layer_worst = layer_worst.max(scale_relation_error(&layer, &w0)?);
    }
    let mut checks = vec![
        Check::new(
            "s_i^2 sigma_i = s_1^2 sigma_0 on 10 spectra",
            worst <= 1e-12,
            format!("worst relative error {worst:.2e}"),
            "<= 1e-12",
        ),
        Check::new(
            "same relation on built layers",
            layer_worst <= 1e-12,
            format!("worst relative error {layer_worst:.2e}"),
            "<= 1e-12",
        ),
    ];
    let prefix = |c: Check, tag: &str| Check {
        name: format!("[{tag}] {}", c.name),
        ..c
    };
    checks.extend(
        gradient_checks(seed, Some(Variant::GoatS))?
            .into_iter()
            .map(|c| prefix(c, "6")),
    );
    checks.extend(
        init_alignment_checks(&rng.split(60), &[Variant::GoatS])?
            .into_iter()
            .map(|c| prefix(c, "7")),
    );
    checks.extend(
        trajectory_checks(&rng.split(70), true)?
            .into_iter()
            .map(|c| prefix(c, "8")),
    );
    Ok(checks)
}

/// Largest `|sᵢ²σᵢ − s₀²σ₀| / s₀²σ₀` with `σᵢ` the segment sums of `w0`.
fn scale_relation_error(layer: &GoatLayer, w0: &Matrix) -> Result<f64> {
    let sigma = svd(w0)?.sigma;
    let sums: Vec<f64> = layer
        .meta
        .segments
        .iter()
        .map(|seg| sigma[seg.start..seg.end()].iter().sum())
        .collect();
    let target = layer.scales[0].powi(2) * sums[0];
    Ok(layer
        .scales
        .iter()
        .zip(&sums)
        .map(|(s, v)| (s * s * v - target).abs() / target)
        .fold(0.0, f64::max))
}
