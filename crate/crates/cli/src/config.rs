//! Run configuration: one flat JSON document per run.

use std::fmt;
use std::path::{Path, PathBuf};

use goat_core::align::{SyntheticTask, TaskKind, TrainConfig};
use goat_core::moe::{LayerConfig, Variant};
use goat_core::svdseg::SegmentStrategy;
use goat_core::{Matrix, Rng};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "GOATLAB_SEED";

const W0_STREAM: u64 = 1;
const TASK_STREAM: u64 = 2;
const LAYER_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;
const PROBE_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunVariant {
    #[serde(rename = "GOAT")]
    Goat,
    #[serde(rename = "GOAT-s")]
    GoatS,
    ZeroMoE,
    PiSSA,
    MiLoRA,
    /// Dense fine-tuning of the whole weight.
    FullFT,
    /// Upcycled MoE: every expert a trainable copy of the weight.
    FullFTMoE,
}

impl RunVariant {
    /// The adapter layer variant, or `None` for full tuning.
    pub fn adapter(self) -> Option<Variant> {
        match self {
            Self::Goat => Some(Variant::Goat),
            Self::GoatS => Some(Variant::GoatS),
            Self::ZeroMoE => Some(Variant::ZeroMoE),
            Self::PiSSA => Some(Variant::PiSSA),
            Self::MiLoRA => Some(Variant::MiLoRA),
            Self::FullFT | Self::FullFTMoE => None,
        }
    }
}

impl fmt::Display for RunVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serialises");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    None,
    /// Dense full tuning of `W₀`.
    Dense,
    /// Upcycled MoE sharing the layer's router initialization.
    Upcycled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskKind,
    /// Output dimension (number of classes for `clusters`).
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    pub perturb_rank: usize,
    pub perturb_scale: f64,
    pub noise_std: f64,
    pub separation: f64,
    /// Use `diag(values)` as the pretrained weight instead of a random one.
    pub w0_diag: Option<Vec<f64>>,
    pub variant: RunVariant,
    #[serde(alias = "E")]
    pub experts: usize,
    pub k: usize,
    #[serde(alias = "r")]
    pub rank: usize,
    pub rho: f64,
    pub eta: f64,
    pub balance_coeff: f64,
    pub strategy: SegmentStrategy,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_router: Option<f64>,
    pub eval_size: usize,
    /// Defaults to `dense` for adapters and `none` for full tuning.
    pub reference: Option<ReferenceKind>,
    pub timing: bool,
    /// Extra seeds on which the variant is compared with ZeroMoE.
    pub paired_seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::TeacherStudent,
            m: 16,
            n: 16,
            perturb_rank: 4,
            perturb_scale: 0.5,
            noise_std: 0.01,
            separation: 2.0,
            w0_diag: None,
            variant: RunVariant::Goat,
            experts: 4,
            k: 2,
            rank: 8,
            rho: 10.0,
            eta: 1.0,
            balance_coeff: 1e-3,
            strategy: SegmentStrategy::Ours,
            steps: 200,
            batch: 16,
            lr: 1e-2,
            lr_router: None,
            eval_size: 256,
            reference: None,
            timing: false,
            paired_seeds: Vec::new(),
            output_dir: PathBuf::from("runs/goat"),
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl RunConfig {
    /// Read, apply the seed override and validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.seed = raw.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reference_kind(&self) -> ReferenceKind {
        self.reference.unwrap_or(match self.variant.adapter() {
            Some(_) => ReferenceKind::Dense,
            None => ReferenceKind::None,
        })
    }

    /// Every problem with the config, one `field: message` per line.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs: Vec<String> = Vec::new();
        let mut bad = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));
        let h = self.m.min(self.n);

        if self.m == 0 || self.n == 0 {
            bad(
                "m/n",
                format!("dimensions must be at least 1, got {}x{}", self.m, self.n),
            );
        }
        match self.task {
            TaskKind::TeacherStudent => {
                if self.perturb_rank == 0 || self.perturb_rank > h {
                    bad(
                        "perturb_rank",
                        format!("must be in 1..={h}, got {}", self.perturb_rank),
                    );
                }
                if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
                    bad(
                        "perturb_scale",
                        format!("must be non-negative, got {}", self.perturb_scale),
                    );
                }
            }
            TaskKind::Clusters => {
                if self.m < 2 {
                    bad("m", "clusters need at least two classes".into());
                }
                if !positive(self.separation) {
                    bad(
                        "separation",
                        format!("must be positive, got {}", self.separation),
                    );
                }
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bad(
                "noise_std",
                format!("must be non-negative, got {}", self.noise_std),
            );
        }
        if let Some(d) = &self.w0_diag {
            if d.len() > h {
                bad(
                    "w0_diag",
                    format!("{} values for a {}x{} weight", d.len(), self.m, self.n),
                );
            }
            if d.iter().any(|v| !v.is_finite()) {
                bad("w0_diag", "values must be finite".into());
            }
        }

        let single = matches!(
            self.variant,
            RunVariant::PiSSA | RunVariant::MiLoRA | RunVariant::FullFT
        );
        if self.experts == 0 {
            bad("experts", "must be at least 1".into());
        } else {
            if single && self.experts != 1 {
                bad(
                    "experts",
                    format!("{} uses a single weight: set experts = 1", self.variant),
                );
            }
            if self.k == 0 || self.k > self.experts {
                bad(
                    "k",
                    format!("must be in 1..={}, got {}", self.experts, self.k),
                );
            }
            if self.variant.adapter().is_some() {
                if self.rank == 0 || !self.rank.is_multiple_of(self.experts) {
                    bad(
                        "rank",
                        format!(
                            "must be a positive multiple of experts ({}), got {}",
                            self.experts, self.rank
                        ),
                    );
                } else if self.rank / self.experts > h / self.experts {
                    bad(
                        "rank",
                        format!(
                            "per-expert rank {} exceeds the segment stride {} of a {}x{} weight",
                            self.rank / self.experts,
                            h / self.experts,
                            self.m,
                            self.n
                        ),
                    );
                }
            }
        }
        if !positive(self.rho) {
            bad("rho", format!("must be positive, got {}", self.rho));
        }
        if !positive(self.eta) {
            bad("eta", format!("must be positive, got {}", self.eta));
        }
        if !(self.balance_coeff >= 0.0 && self.balance_coeff.is_finite()) {
            bad(
                "balance_coeff",
                format!("must be non-negative, got {}", self.balance_coeff),
            );
        }
        if self.batch == 0 {
            bad("batch", "must be at least 1".into());
        }
        if !positive(self.lr) {
            bad("lr", format!("must be positive, got {}", self.lr));
        }
        if let Some(v) = self.lr_router {
            if !(v >= 0.0 && v.is_finite()) {
                bad("lr_router", format!("must be non-negative, got {v}"));
            }
        }
        if self.variant.adapter().is_none()
            && matches!(self.reference, Some(r) if r != ReferenceKind::None)
        {
            bad(
                "reference",
                format!(
                    "{} is itself a full-tuning model; use \"none\"",
                    self.variant
                ),
            );
        }
        if !self.paired_seeds.is_empty() {
            if self.variant.adapter().is_none() {
                bad(
                    "paired_seeds",
                    "the comparison with ZeroMoE needs an adapter variant".into(),
                );
            }
            if self.eval_size == 0 {
                bad(
                    "paired_seeds",
                    "the comparison uses held-out loss: set eval_size > 0".into(),
                );
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            bad("output_dir", "must not be empty".into());
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "invalid config:\n  {}",
                errs.join("\n  ")
            )))
        }
    }

    pub fn root_rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    pub fn train_rng(&self) -> Rng {
        self.root_rng().split(TRAIN_STREAM)
    }

    /// Fresh inputs for measuring the final routing load.
    pub fn probe_rng(&self) -> Rng {
        self.root_rng().split(PROBE_STREAM)
    }

    pub fn layer_rng(&self) -> Rng {
        self.root_rng().split(LAYER_STREAM)
    }

    pub fn pretrained(&self) -> Matrix {
        match &self.w0_diag {
            Some(d) => Matrix::diag_rect(self.m, self.n, d),
            None => self.root_rng().split(W0_STREAM).normal_matrix(
                self.m,
                self.n,
                1.0 / (self.n as f64).sqrt(),
            ),
        }
    }

    pub fn task(&self, w0: &Matrix) -> Result<SyntheticTask, CliError> {
        let mut rng = self.root_rng().split(TASK_STREAM);
        let task = match self.task {
            TaskKind::TeacherStudent => SyntheticTask::teacher_student(
                w0,
                self.perturb_rank,
                self.perturb_scale,
                self.noise_std,
                &mut rng,
            )?,
            TaskKind::Clusters => {
                SyntheticTask::clusters(self.m, self.n, self.separation, self.noise_std, &mut rng)?
            }
        };
        Ok(task)
    }

    /// Layer settings for `variant` (the configured one unless overridden).
    pub fn layer_config(&self, variant: Variant) -> LayerConfig {
        LayerConfig {
            experts: self.experts,
            k: self.k,
            rank: self.rank,
            eta: self.eta,
            rho: self.rho,
            strategy: self.strategy,
            variant,
            balance_coeff: self.balance_coeff,
            ..LayerConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            lr_ref: self.lr,
            lr_router: self.lr_router,
            eval_size: self.eval_size,
            eval_every: self.steps.max(1),
            timing: self.timing,
        }
    }
}
