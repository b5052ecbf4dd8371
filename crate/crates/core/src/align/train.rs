use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::equiv::equivalent_gradient;
use crate::align::tasks::{Sample, SyntheticTask};
use crate::error::{domain, GoatError, Result};
use crate::moe::{
    balance_loss, load_fractions, router_backward, BalanceContext, GoatLayer, LayerGrads,
    RouteResult, Router,
};
use crate::numkit::{dot, Matrix, Rng};

const DATA_STREAM: u64 = 11;
const EVAL_STREAM: u64 = 12;

/// Dense model trained alongside the adapter layer.
#[derive(Clone, Debug)]
pub enum Reference {
    /// Full fine-tuning of a single weight.
    Dense { w: Matrix },
    /// Upcycled MoE: every expert starts as a copy of the pretrained weight.
    Upcycled {
        experts: Vec<Matrix>,
        router: Router,
        balance_coeff: f64,
    },
}

impl Reference {
    pub fn dense(w0: &Matrix) -> Self {
        Self::Dense { w: w0.clone() }
    }

    /// Upcycled copy of `w0` sharing `layer`'s router initialization.
    pub fn upcycled(w0: &Matrix, layer: &GoatLayer) -> Self {
        Self::Upcycled {
            experts: vec![w0.clone(); layer.num_experts()],
            router: layer.router.clone(),
            balance_coeff: layer.balance_coeff,
        }
    }

    /// Dense weight seen by each expert slot (one slot for `Dense`).
    pub fn weights(&self) -> Vec<&Matrix> {
        match self {
            Self::Dense { w } => vec![w],
            Self::Upcycled { experts, .. } => experts.iter().collect(),
        }
    }

    fn weight_for(&self, i: usize) -> &Matrix {
        match self {
            Self::Dense { w } => w,
            Self::Upcycled { experts, .. } => &experts[i],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Option<RouteResult>)> {
        match self {
            Self::Dense { w } => Ok((w.matvec(x)?, None)),
            Self::Upcycled {
                experts, router, ..
            } => {
                let route = router.route(x)?;
                let mut y = vec![0.0; experts[0].rows()];
                for &i in &route.indices {
                    for (o, v) in y.iter_mut().zip(experts[i].matvec(x)?) {
                        *o += route.weights[i] * v;
                    }
                }
                Ok((y, Some(route)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Learning rate of the adapter factors (`η_L`).
    pub lr: f64,
    /// Learning rate of the dense reference (`η_F`).
    pub lr_ref: f64,
    /// Router learning rate, shared by both models; defaults to `lr`.
    pub lr_router: Option<f64>,
    /// Held-out evaluation set size; 0 disables evaluation.
    pub eval_size: usize,
    pub eval_every: usize,
    /// Record wall time; off by default so outputs are byte-stable.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 16,
            lr: 1e-2,
            lr_ref: 1e-2,
            lr_router: None,
            eval_size: 0,
            eval_every: 100,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return domain("batch must be at least 1");
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_ref", self.lr_ref),
            ("lr_router", self.router_lr()),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.eval_size > 0 && self.eval_every == 0 {
            return domain("eval_every must be at least 1 when evaluating");
        }
        Ok(())
    }

    fn router_lr(&self) -> f64 {
        self.lr_router.unwrap_or(self.lr)
    }
}

/// Everything measured at one step, before that step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Unscaled balance loss `Σ fᵢPᵢ` of the batch.
    pub balance_loss: f64,
    /// Share of routing slots taken by each expert; sums to 1.
    pub load: Vec<f64>,
    pub loss_ref: Option<f64>,
    /// `‖(1/E)Σᵢ (W̃ⁱ − Wⁱ)‖_F`.
    pub weight_gap: Option<f64>,
    /// `maxᵢ ‖W̃ⁱ − Wⁱ‖_F`.
    pub expert_gap_max: Option<f64>,
    /// `‖(1/E)Σᵢ (η_L·g̃ⁱ − η_F·gⁱ)‖_F`.
    pub grad_gap: Option<f64>,
    /// Fraction of tokens routed to the same expert set by both models.
    pub routing_agreement: Option<f64>,
    pub eval_loss: Option<f64>,
    pub wall_ms: u64,
}

pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub layer: GoatLayer,
    pub reference: Option<Reference>,
    /// Set when the run stopped early; `records` holds the steps completed.
    pub error: Option<GoatError>,
}

struct LayerPass {
    loss: f64,
    grads: LayerGrads,
    routes: Vec<RouteResult>,
    /// `∂L/∂W̃ⁱ` per expert, only when a reference needs it.
    dense_grads: Option<Vec<Matrix>>,
}

fn layer_pass(
    layer: &GoatLayer,
    task: &SyntheticTask,
    batch: &[Sample],
    dense: bool,
) -> Result<LayerPass> {
    let inv = 1.0 / batch.len() as f64;
    let (m, n) = layer.shape();
    let mut routes = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for s in batch {
        let (y, r) = layer.forward(&s.x)?;
        outputs.push(y);
        routes.push(r);
    }
    let ctx = BalanceContext {
        fractions: load_fractions(&routes, layer.num_experts(), layer.k())?,
        tokens: 1,
    };
    let mut grads = LayerGrads::zeros_like(layer);
    let mut dense_grads = dense.then(|| vec![Matrix::zeros(m, n); layer.num_experts()]);
    let mut loss = 0.0;
    for ((s, y), r) in batch.iter().zip(&outputs).zip(&routes) {
        let (l, g_y) = task.loss_grad(y, s);
        loss += inv * l;
        grads.accumulate(inv, &layer.backward_with(&s.x, r, &g_y, &ctx)?)?;
        if let Some(dg) = dense_grads.as_mut() {
            for &i in &r.indices {
                dg[i].add_outer(inv * r.weights[i], &g_y, &s.x)?;
            }
        }
    }
    Ok(LayerPass {
        loss,
        grads,
        routes,
        dense_grads,
    })
}

struct RefPass {
    loss: f64,
    grads: Vec<Matrix>,
    g_wz: Option<Matrix>,
    routes: Vec<RouteResult>,
}

fn reference_pass(
    reference: &Reference,
    task: &SyntheticTask,
    batch: &[Sample],
) -> Result<RefPass> {
    let inv = 1.0 / batch.len() as f64;
    let slots = reference.weights().len();
    let (m, n) = reference.weight_for(0).shape();
    let mut outputs = Vec::with_capacity(batch.len());
    let mut routes = Vec::new();
    for s in batch {
        let (y, r) = reference.forward(&s.x)?;
        outputs.push(y);
        routes.extend(r);
    }
    let mut grads = vec![Matrix::zeros(m, n); slots];
    let mut loss = 0.0;
    match reference {
        Reference::Dense { .. } => {
            for (s, y) in batch.iter().zip(&outputs) {
                let (l, g_y) = task.loss_grad(y, s);
                loss += inv * l;
                grads[0].add_outer(inv, &g_y, &s.x)?;
            }
            Ok(RefPass {
                loss,
                grads,
                g_wz: None,
                routes,
            })
        }
        Reference::Upcycled {
            experts,
            router,
            balance_coeff,
        } => {
            let ctx = BalanceContext {
                fractions: load_fractions(&routes, slots, router.k)?,
                tokens: 1,
            };
            let mut g_wz = Matrix::zeros(router.wz.rows(), router.wz.cols());
            for ((s, y), r) in batch.iter().zip(&outputs).zip(&routes) {
                let (l, g_y) = task.loss_grad(y, s);
                loss += inv * l;
                let mut contrib = vec![0.0; slots];
                for &i in &r.indices {
                    grads[i].add_outer(inv * r.weights[i], &g_y, &s.x)?;
                    contrib[i] = dot(&g_y, &experts[i].matvec(&s.x)?);
                }
                let mut token = Matrix::zeros(g_wz.rows(), g_wz.cols());
                router_backward(&s.x, r, &contrib, &ctx, *balance_coeff, &mut token);
                g_wz.add_scaled(inv, &token)?;
            }
            Ok(RefPass {
                loss,
                grads,
                g_wz: Some(g_wz),
                routes,
            })
        }
    }
}

fn mean_loss(layer: &GoatLayer, task: &SyntheticTask, set: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += task.loss_grad(&layer.forward(&s.x)?.0, s).0;
    }
    Ok(total / set.len() as f64)
}

fn load_shares(routes: &[RouteResult], experts: usize, k: usize) -> Result<Vec<f64>> {
    Ok(load_fractions(routes, experts, k)?
        .into_iter()
        .map(|f| f / experts as f64)
        .collect())
}

/// Train `layer` (and `reference`, when given) with plain SGD on identical
/// batches drawn from `task`.
///
/// Row `t` of the output describes the models after `t` updates, so a run
/// of `steps` updates yields `steps + 1` rows. A non-finite loss stops the
/// run; the rows completed so far are kept.
pub fn run_experiment(
    task: &SyntheticTask,
    mut layer: GoatLayer,
    mut reference: Option<Reference>,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (m, n) = layer.shape();
    if task.input_dim() != n || task.output_dim() != m {
        return Err(GoatError::Shape {
            op: "task vs layer",
            left: (task.output_dim(), task.input_dim()),
            right: (m, n),
        });
    }
    if let Some(r) = &reference {
        let slots = r.weights().len();
        if r.weight_for(0).shape() != (m, n) || (slots != 1 && slots != layer.num_experts()) {
            return domain("reference model does not match the layer");
        }
    }
    let mut data_rng = rng.split(DATA_STREAM);
    let eval_set = task.batch(cfg.eval_size, &mut rng.split(EVAL_STREAM));
    let started = Instant::now();
    let e = layer.num_experts();
    let mut records = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let batch = task.batch(cfg.batch, &mut data_rng);
        let pass = match layer_pass(&layer, task, &batch, reference.is_some()) {
            Ok(p) => p,
            Err(err) => return Ok(stopped(records, layer, reference, diverged(step, err))),
        };
        if !pass.loss.is_finite() || !pass.grads.is_finite() {
            let err = GoatError::Diverged {
                step,
                reason: format!("adapter loss {}", pass.loss),
            };
            return Ok(stopped(records, layer, reference, err));
        }
        let mut rec = StepRecord {
            step,
            loss: pass.loss,
            balance_loss: pass.grads.balance_loss,
            load: load_shares(&pass.routes, e, layer.k())?,
            loss_ref: None,
            weight_gap: None,
            expert_gap_max: None,
            grad_gap: None,
            routing_agreement: None,
            eval_loss: None,
            wall_ms: 0,
        };

        let ref_pass = match &reference {
            Some(r) => Some(reference_pass(r, task, &batch)?),
            None => None,
        };
        if let (Some(r), Some(rp)) = (&reference, &ref_pass) {
            if !rp.loss.is_finite() {
                let err = GoatError::Diverged {
                    step,
                    reason: format!("reference loss {}", rp.loss),
                };
                return Ok(stopped(records, layer, reference, err));
            }
            rec.loss_ref = Some(rp.loss);
            let dense = pass
                .dense_grads
                .as_ref()
                .expect("requested with a reference");
            let mut w_gap = Matrix::zeros(m, n);
            let mut g_gap = Matrix::zeros(m, n);
            let mut worst = 0.0f64;
            for (i, dense_i) in dense.iter().enumerate() {
                let slot = if rp.grads.len() == 1 { 0 } else { i };
                let diff = layer.expert_weight(i).sub(r.weight_for(slot))?;
                worst = worst.max(diff.frobenius_norm());
                w_gap.add_scaled(1.0 / e as f64, &diff)?;
                let p = &layer.experts[i];
                let g_tilde = equivalent_gradient(&p.b, &p.a, dense_i, layer.scales[i])?;
                g_gap.add_scaled(cfg.lr / e as f64, &g_tilde)?;
                g_gap.add_scaled(-cfg.lr_ref / e as f64, &rp.grads[slot])?;
            }
            rec.weight_gap = Some(w_gap.frobenius_norm());
            rec.expert_gap_max = Some(worst);
            rec.grad_gap = Some(g_gap.frobenius_norm());
            if !rp.routes.is_empty() {
                let same = pass
                    .routes
                    .iter()
                    .zip(&rp.routes)
                    .filter(|(a, b)| a.indices == b.indices)
                    .count();
                rec.routing_agreement = Some(same as f64 / batch.len() as f64);
            }
        }
        if !eval_set.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            rec.eval_loss = Some(mean_loss(&layer, task, &eval_set)?);
        }
        if cfg.timing {
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        records.push(rec);

        if step == cfg.steps {
            break;
        }
        if let Err(err) = layer.apply_sgd_with(&pass.grads, cfg.lr, cfg.router_lr()) {
            return Ok(stopped(records, layer, reference, diverged(step + 1, err)));
        }
        if let (Some(r), Some(rp)) = (reference.as_mut(), ref_pass) {
            match r {
                Reference::Dense { w } => w.add_scaled(-cfg.lr_ref, &rp.grads[0])?,
                Reference::Upcycled {
                    experts, router, ..
                } => {
                    for (w, g) in experts.iter_mut().zip(&rp.grads) {
                        w.add_scaled(-cfg.lr_ref, g)?;
                    }
                    let g_wz = rp.g_wz.expect("upcycled pass computes router gradient");
                    router.wz.add_scaled(-cfg.router_lr(), &g_wz)?;
                }
            }
        }
    }
    Ok(RunOutput {
        records,
        layer,
        reference,
        error: None,
    })
}

/// Numeric failures inside a step are reported as divergence at that step.
fn diverged(step: usize, err: GoatError) -> GoatError {
    match err {
        GoatError::Numeric(reason) => GoatError::Diverged { step, reason },
        other => other,
    }
}

fn stopped(
    records: Vec<StepRecord>,
    layer: GoatLayer,
    reference: Option<Reference>,
    err: GoatError,
) -> RunOutput {
    RunOutput {
        records,
        layer,
        reference,
        error: Some(err),
    }
}

/// A dense or upcycled model trained on its own.
pub struct ReferenceRun {
    pub records: Vec<StepRecord>,
    pub reference: Reference,
    pub error: Option<GoatError>,
}

fn reference_loss(reference: &Reference, task: &SyntheticTask, set: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += task.loss_grad(&reference.forward(&s.x)?.0, s).0;
    }
    Ok(total / set.len() as f64)
}

/// Train a full-tuning baseline with the same batches, schedule and record
/// layout as [`run_experiment`]. A dense model reports one expert slot with
/// load 1 and zero balance loss; gap fields stay empty.
pub fn train_reference(
    task: &SyntheticTask,
    mut reference: Reference,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<ReferenceRun> {
    cfg.validate()?;
    let w = reference.weight_for(0);
    if task.input_dim() != w.cols() || task.output_dim() != w.rows() {
        return Err(GoatError::Shape {
            op: "task vs reference",
            left: (task.output_dim(), task.input_dim()),
            right: w.shape(),
        });
    }
    let mut data_rng = rng.split(DATA_STREAM);
    let eval_set = task.batch(cfg.eval_size, &mut rng.split(EVAL_STREAM));
    let started = Instant::now();
    let slots = reference.weights().len();
    let mut records = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let batch = task.batch(cfg.batch, &mut data_rng);
        let rp = reference_pass(&reference, task, &batch)?;
        if !rp.loss.is_finite() || rp.grads.iter().any(|g| !g.is_finite()) {
            let error = GoatError::Diverged {
                step,
                reason: format!("reference loss {}", rp.loss),
            };
            return Ok(ReferenceRun {
                records,
                reference,
                error: Some(error),
            });
        }
        let (balance, load) = match &reference {
            Reference::Dense { .. } => (0.0, vec![1.0]),
            Reference::Upcycled { router, .. } => {
                let logits: Vec<Vec<f64>> = rp.routes.iter().map(|r| r.logits.clone()).collect();
                (
                    balance_loss(&rp.routes, &logits, slots, router.k)?,
                    load_shares(&rp.routes, slots, router.k)?,
                )
            }
        };
        let mut rec = StepRecord {
            step,
            loss: rp.loss,
            balance_loss: balance,
            load,
            loss_ref: None,
            weight_gap: None,
            expert_gap_max: None,
            grad_gap: None,
            routing_agreement: None,
            eval_loss: None,
            wall_ms: 0,
        };
        if !eval_set.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            rec.eval_loss = Some(reference_loss(&reference, task, &eval_set)?);
        }
        if cfg.timing {
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        records.push(rec);
        if step == cfg.steps {
            break;
        }
        match &mut reference {
            Reference::Dense { w } => w.add_scaled(-cfg.lr_ref, &rp.grads[0])?,
            Reference::Upcycled {
                experts, router, ..
            } => {
                for (w, g) in experts.iter_mut().zip(&rp.grads) {
                    w.add_scaled(-cfg.lr_ref, g)?;
                }
                let g_wz = rp.g_wz.expect("upcycled pass computes router gradient");
                router.wz.add_scaled(-cfg.router_lr(), &g_wz)?;
            }
        }
    }
    Ok(ReferenceRun {
        records,
        reference,
        error: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub loss_ref: f64,
    pub loss_lora: f64,
    pub weight_gap: f64,
    pub grad_gap: f64,
}

/// Per-step comparison of an adapter model against its dense reference.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryReport {
    pub rows: Vec<TrajectoryRow>,
    pub expert_gap_max: Vec<f64>,
    /// Empty when the reference has no router.
    pub routing_agreement: Vec<f64>,
}

impl TrajectoryReport {
    pub fn from_records(records: &[StepRecord]) -> Result<Self> {
        let mut report = TrajectoryReport {
            rows: Vec::with_capacity(records.len()),
            expert_gap_max: Vec::with_capacity(records.len()),
            routing_agreement: Vec::new(),
        };
        for r in records {
            let (Some(loss_ref), Some(weight_gap), Some(grad_gap), Some(worst)) =
                (r.loss_ref, r.weight_gap, r.grad_gap, r.expert_gap_max)
            else {
                return Err(GoatError::Contract(
                    "trajectory needs a reference model".into(),
                ));
            };
            report.rows.push(TrajectoryRow {
                step: r.step,
                loss_ref,
                loss_lora: r.loss,
                weight_gap,
                grad_gap,
            });
            report.expert_gap_max.push(worst);
            report.routing_agreement.extend(r.routing_agreement);
        }
        Ok(report)
    }

    pub fn max_weight_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.weight_gap).fold(0.0, f64::max)
    }

    pub fn max_expert_gap(&self) -> f64 {
        self.expert_gap_max.iter().copied().fold(0.0, f64::max)
    }

    pub fn routing_always_agrees(&self) -> bool {
        self.routing_agreement.iter().all(|&a| a == 1.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Train the layer against `reference` and report the per-step gaps.
pub fn run_alignment_experiment(
    task: &SyntheticTask,
    layer: GoatLayer,
    reference: Reference,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrajectoryReport> {
    let out = run_experiment(task, layer, Some(reference), cfg, rng)?;
    if let Some(err) = out.error {
        return Err(err);
    }
    TrajectoryReport::from_records(&out.records)
}
