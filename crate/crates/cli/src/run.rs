//! `train` and `inspect-init`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use goat_core::align::{
    median, run_experiment, train_reference, Reference, StepRecord, SyntheticTask,
};
use goat_core::moe::{build_goat_layer, load_fractions, GoatLayer, RouteResult, Router, Variant};
use goat_core::numkit::svd;
use goat_core::svdseg::ExpertSource;
use goat_core::{GoatError, Matrix};
use serde::Serialize;

use crate::config::{ReferenceKind, RunConfig, RunVariant};
use crate::error::CliError;

pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG_COPY: &str = "config.json";
pub const SNAPSHOT: &str = "snapshot";

/// Shortest round-trip form; exponent notation for very small or large values.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// `step,loss,balance_loss,f1..fE,weight_gap,wall_ms`; an empty cell means
/// no reference model ran.
pub fn metrics_csv(records: &[StepRecord], experts: usize) -> String {
    let mut out = String::from("step,loss,balance_loss");
    for i in 1..=experts {
        let _ = write!(out, ",f{i}");
    }
    out.push_str(",weight_gap,wall_ms\n");
    for r in records {
        let _ = write!(out, "{},{},{}", r.step, num(r.loss), num(r.balance_loss));
        for f in &r.load {
            let _ = write!(out, ",{}", num(*f));
        }
        out.push(',');
        if let Some(g) = r.weight_gap {
            out.push_str(&num(g));
        }
        let _ = writeln!(out, ",{}", r.wall_ms);
    }
    out
}

#[derive(Debug, Serialize)]
pub struct PairedRun {
    pub seed: u64,
    pub variant_eval_loss: f64,
    pub zero_moe_eval_loss: f64,
}

#[derive(Debug, Serialize)]
pub struct Paired {
    pub variant: RunVariant,
    pub runs: Vec<PairedRun>,
    pub variant_median: f64,
    pub zero_moe_median: f64,
    pub variant_median_le_zero_moe: bool,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub variant: RunVariant,
    pub seed: u64,
    pub status: &'static str,
    pub error: Option<String>,
    pub steps_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub initial_eval_loss: Option<f64>,
    pub final_eval_loss: Option<f64>,
    pub final_balance_loss: Option<f64>,
    pub initial_weight_gap: Option<f64>,
    pub final_weight_gap: Option<f64>,
    pub max_weight_gap: Option<f64>,
    /// Share of routing slots per expert in the last logged batch.
    pub final_load: Vec<f64>,
    /// Share of routing slots per expert over `eval_size` fresh inputs
    /// routed by the final model.
    pub probe_load: Vec<f64>,
    /// `max_i |E·share_i − 1|` of `probe_load`: relative deviation from an
    /// even split.
    pub max_load_deviation: Option<f64>,
    pub paired: Option<Paired>,
}

impl Summary {
    fn new(
        cfg: &RunConfig,
        records: &[StepRecord],
        probe_load: Vec<f64>,
        error: Option<&GoatError>,
    ) -> Self {
        let first = records.first();
        let last = records.last();
        let evals: Vec<f64> = records.iter().filter_map(|r| r.eval_loss).collect();
        let gaps: Vec<f64> = records.iter().filter_map(|r| r.weight_gap).collect();
        let e = probe_load.len() as f64;
        Self {
            variant: cfg.variant,
            seed: cfg.seed,
            status: if error.is_some() {
                "diverged"
            } else {
                "completed"
            },
            error: error.map(|e| e.to_string()),
            steps_completed: records.len().saturating_sub(1),
            initial_loss: first.map(|r| r.loss),
            final_loss: last.map(|r| r.loss),
            initial_eval_loss: evals.first().copied(),
            final_eval_loss: evals.last().copied(),
            final_balance_loss: last.map(|r| r.balance_loss),
            initial_weight_gap: gaps.first().copied(),
            final_weight_gap: gaps.last().copied(),
            max_weight_gap: gaps.iter().copied().reduce(f64::max),
            max_load_deviation: (!probe_load.is_empty()).then(|| {
                probe_load
                    .iter()
                    .map(|f| (e * f - 1.0).abs())
                    .fold(0.0, f64::max)
            }),
            final_load: last.map(|r| r.load.clone()).unwrap_or_default(),
            probe_load,
            paired: None,
        }
    }
}

/// Load fractions normalised to shares summing to 1; empty without inputs.
fn shares(routes: &[RouteResult], experts: usize, k: usize) -> Result<Vec<f64>, CliError> {
    if routes.is_empty() {
        return Ok(Vec::new());
    }
    Ok(load_fractions(routes, experts, k)?
        .into_iter()
        .map(|f| f / experts as f64)
        .collect())
}

struct Problem {
    w0: Matrix,
    task: SyntheticTask,
}

fn problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    let w0 = cfg.pretrained();
    let task = cfg.task(&w0)?;
    Ok(Problem { w0, task })
}

fn adapter_layer(cfg: &RunConfig, w0: &Matrix, variant: Variant) -> Result<GoatLayer, CliError> {
    Ok(build_goat_layer(
        w0,
        &cfg.layer_config(variant),
        &mut cfg.layer_rng(),
    )?)
}

fn save_reference(reference: &Reference, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (i, w) in reference.weights().into_iter().enumerate() {
        w.save(dir.join(format!("w_{i}.txt")))?;
    }
    if let Reference::Upcycled { router, .. } = reference {
        router.wz.save(dir.join("router.txt"))?;
    }
    Ok(())
}

/// Final held-out loss of an adapter run without a reference.
fn final_eval(cfg: &RunConfig, p: &Problem, variant: Variant) -> Result<f64, CliError> {
    let layer = adapter_layer(cfg, &p.w0, variant)?;
    let out = run_experiment(&p.task, layer, None, &cfg.train_config(), &cfg.train_rng())?;
    if out.error.is_some() {
        return Ok(f64::INFINITY);
    }
    Ok(out
        .records
        .iter()
        .filter_map(|r| r.eval_loss)
        .next_back()
        .unwrap_or(f64::INFINITY))
}

fn paired_comparison(cfg: &RunConfig) -> Result<Paired, CliError> {
    let variant = cfg.variant.adapter().expect("validated: adapter variant");
    let mut runs = Vec::with_capacity(cfg.paired_seeds.len());
    for &seed in &cfg.paired_seeds {
        let run_cfg = RunConfig {
            seed,
            reference: Some(ReferenceKind::None),
            ..cfg.clone()
        };
        let p = problem(&run_cfg)?;
        runs.push(PairedRun {
            seed,
            variant_eval_loss: final_eval(&run_cfg, &p, variant)?,
            zero_moe_eval_loss: final_eval(&run_cfg, &p, Variant::ZeroMoE)?,
        });
    }
    let a: Vec<f64> = runs.iter().map(|r| r.variant_eval_loss).collect();
    let b: Vec<f64> = runs.iter().map(|r| r.zero_moe_eval_loss).collect();
    let (variant_median, zero_moe_median) = (median(&a), median(&b));
    Ok(Paired {
        variant: cfg.variant,
        runs,
        variant_median,
        zero_moe_median,
        variant_median_le_zero_moe: variant_median <= zero_moe_median,
    })
}

/// Train per `cfg` and write the run directory. A diverged run keeps its
/// metrics and summary and is then reported as a failure.
pub fn train(cfg: &RunConfig) -> Result<Summary, CliError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(CONFIG_COPY),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    let p = problem(cfg)?;
    let tcfg = cfg.train_config();
    let snapshot = dir.join(SNAPSHOT);

    let probe = p.task.batch(cfg.eval_size, &mut cfg.probe_rng());
    let (records, error, experts, probe_load) = match cfg.variant.adapter() {
        Some(variant) => {
            let layer = adapter_layer(cfg, &p.w0, variant)?;
            let reference = match cfg.reference_kind() {
                ReferenceKind::None => None,
                ReferenceKind::Dense => Some(Reference::dense(&p.w0)),
                ReferenceKind::Upcycled => Some(Reference::upcycled(&p.w0, &layer)),
            };
            let e = layer.num_experts();
            let out = run_experiment(&p.task, layer, reference, &tcfg, &cfg.train_rng())?;
            out.layer.save_snapshot(&snapshot)?;
            let routes = probe
                .iter()
                .map(|s| out.layer.route(&s.x))
                .collect::<Result<Vec<_>, _>>()?;
            let load = shares(&routes, e, cfg.k)?;
            (out.records, out.error, e, load)
        }
        None => {
            let reference = if cfg.variant == RunVariant::FullFT {
                Reference::dense(&p.w0)
            } else {
                Reference::Upcycled {
                    experts: vec![p.w0.clone(); cfg.experts],
                    router: Router::random(cfg.experts, cfg.n, cfg.k, &mut cfg.layer_rng())?,
                    balance_coeff: cfg.balance_coeff,
                }
            };
            let e = reference.weights().len();
            let run = train_reference(&p.task, reference, &tcfg, &cfg.train_rng())?;
            save_reference(&run.reference, &snapshot)?;
            let mut routes = Vec::new();
            for s in &probe {
                routes.extend(run.reference.forward(&s.x)?.1);
            }
            let load = if routes.is_empty() {
                vec![1.0]
            } else {
                shares(&routes, e, cfg.k)?
            };
            (run.records, run.error, e, load)
        }
    };

    fs::write(dir.join(METRICS), metrics_csv(&records, experts))?;
    let mut summary = Summary::new(cfg, &records, probe_load, error.as_ref());
    if error.is_none() && !cfg.paired_seeds.is_empty() {
        summary.paired = Some(paired_comparison(cfg)?);
    }
    fs::write(
        dir.join(SUMMARY),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    match error {
        Some(err) => Err(CliError::Failed(format!(
            "{err}; {} rows kept in {}",
            records.len(),
            dir.join(METRICS).display()
        ))),
        None => Ok(summary),
    }
}

#[derive(Debug, Serialize)]
pub struct ExpertInit {
    /// 1-based.
    pub expert: usize,
    /// First singular index of the segment; `None` for zero-initialised experts.
    pub start: Option<usize>,
    pub width: usize,
    /// Sum of the segment's singular values of `W₀`.
    pub sigma_sum: Option<f64>,
    pub scale: f64,
    /// `‖bⁱaⁱ‖_F`.
    pub ba_norm: f64,
}

#[derive(Debug, Serialize)]
pub struct InitReport {
    pub variant: RunVariant,
    pub shape: (usize, usize),
    pub rho: f64,
    pub w0_norm: f64,
    /// `‖W_res‖_F` with `W_res = W₀ − w_base`.
    pub w_res_norm: f64,
    /// `‖w_base + W_res − W₀‖_F` using the experts' actual products.
    pub residual: f64,
    pub experts: Vec<ExpertInit>,
}

pub fn inspect_init(cfg: &RunConfig) -> Result<InitReport, CliError> {
    let Some(variant) = cfg.variant.adapter() else {
        return Err(CliError::Usage(format!(
            "variant: {} has no adapter experts to inspect",
            cfg.variant
        )));
    };
    let w0 = cfg.pretrained();
    let layer = adapter_layer(cfg, &w0, variant)?;
    let sigma = svd(&w0)?.sigma;
    let experts = layer
        .experts
        .iter()
        .zip(&layer.scales)
        .enumerate()
        .map(|(i, (p, &scale))| {
            let seg = match &p.source {
                ExpertSource::Segment(s) => Some(*s),
                ExpertSource::ZeroInit => None,
            };
            ExpertInit {
                expert: i + 1,
                start: seg.map(|s| s.start),
                width: p.rank,
                sigma_sum: seg.map(|s| sigma[s.start..s.end()].iter().sum()),
                scale,
                ba_norm: p.product().frobenius_norm(),
            }
        })
        .collect();
    Ok(InitReport {
        variant: cfg.variant,
        shape: layer.shape(),
        rho: layer.rho,
        w0_norm: w0.frobenius_norm(),
        w_res_norm: w0.sub(&layer.w_base)?.frobenius_norm(),
        residual: layer.alignment_error(&w0)?,
        experts,
    })
}

impl InitReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} on a {}x{} weight, rho {}: ||W0|| {:.6e}, ||W_res|| {:.6e}, residual {:.3e}\n",
            self.variant,
            self.shape.0,
            self.shape.1,
            self.rho,
            self.w0_norm,
            self.w_res_norm,
            self.residual
        );
        out.push_str("expert  start  width       sigma_sum           s        ||b a||\n");
        let dash = || "-".to_string();
        for e in &self.experts {
            let _ = writeln!(
                out,
                "{:>6}  {:>5}  {:>5}  {:>14}  {:>10.6}  {:>13.6e}",
                e.expert,
                e.start.map_or_else(dash, |s| s.to_string()),
                e.width,
                e.sigma_sum.map_or_else(dash, |s| format!("{s:.6e}")),
                e.scale,
                e.ba_norm
            );
        }
        out
    }
}
