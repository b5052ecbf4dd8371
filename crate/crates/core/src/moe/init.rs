use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, GoatError, Result};
use crate::moe::layer::{GoatLayer, LayerMeta};
use crate::moe::router::Router;
use crate::numkit::{kaiming_uniform, svd, Matrix, Rng};
use crate::svdseg::{
    build_expert, build_single_lora_init, make_segments, ExpertPair, ExpertSource, SegmentStrategy,
    SingleLoraVariant,
};

/// Sub-stream labels, so each random component is independent of the
/// others' draw counts.
pub(crate) const ROUTER_STREAM: u64 = 1;
pub(crate) const SEGMENT_STREAM: u64 = 2;
pub(crate) const EXPERT_STREAM: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// SVD-segment experts with a shared scale.
    #[serde(rename = "GOAT")]
    Goat,
    /// SVD-segment experts with per-expert scales.
    #[serde(rename = "GOAT-s")]
    GoatS,
    /// Zero-initialised `b`, Kaiming `a`, base weight untouched.
    ZeroMoE,
    /// Single adapter on the principal triples.
    PiSSA,
    /// Single adapter on the minor triples.
    MiLoRA,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Goat => "GOAT",
            Self::GoatS => "GOAT-s",
            Self::ZeroMoE => "ZeroMoE",
            Self::PiSSA => "PiSSA",
            Self::MiLoRA => "MiLoRA",
        }
    }

    pub fn is_single(self) -> bool {
        matches!(self, Self::PiSSA | Self::MiLoRA)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "goat" => Ok(Self::Goat),
            "goat-s" | "goats" => Ok(Self::GoatS),
            "zeromoe" | "zero-moe" | "molora" => Ok(Self::ZeroMoE),
            "pissa" => Ok(Self::PiSSA),
            "milora" => Ok(Self::MiLoRA),
            _ => domain(format!("unknown layer variant {s:?}")),
        }
    }
}

/// Which rank goes under the square root of the scaling rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDenominator {
    /// Per-expert rank `d = r/E`.
    #[default]
    ExpertRank,
    /// Total rank `r`.
    TotalRank,
    /// The damping constant `ρ`.
    Rho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub experts: usize,
    pub k: usize,
    /// Total adapter rank `r`; each expert has rank `r / experts`.
    pub rank: usize,
    /// Learning-rate ratio between full tuning and the adapter.
    pub eta: f64,
    pub rho: f64,
    pub strategy: SegmentStrategy,
    pub variant: Variant,
    pub balance_coeff: f64,
    pub scale_denominator: ScaleDenominator,
    /// Scale used by [`Variant::ZeroMoE`], which has no closed-form rule.
    pub zero_init_scale: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            experts: 8,
            k: 2,
            rank: 32,
            eta: 1.0,
            rho: 10.0,
            strategy: SegmentStrategy::Ours,
            variant: Variant::Goat,
            balance_coeff: 1e-3,
            scale_denominator: ScaleDenominator::ExpertRank,
            zero_init_scale: 2.0,
        }
    }
}

impl LayerConfig {
    pub fn expert_rank(&self) -> usize {
        self.rank / self.experts.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return domain("experts must be at least 1");
        }
        if self.k == 0 || self.k > self.experts {
            return domain(format!("k must be in 1..={}, got {}", self.experts, self.k));
        }
        if self.rank == 0 || !self.rank.is_multiple_of(self.experts) {
            return domain(format!(
                "experts ({}) must divide rank ({})",
                self.experts, self.rank
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return domain(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return domain(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.balance_coeff >= 0.0 && self.balance_coeff.is_finite()) {
            return domain(format!(
                "balance_coeff must be non-negative, got {}",
                self.balance_coeff
            ));
        }
        if !(self.zero_init_scale > 0.0 && self.zero_init_scale.is_finite()) {
            return domain("zero_init_scale must be positive");
        }
        if self.variant.is_single() && (self.experts != 1 || self.k != 1) {
            return domain(format!(
                "{} is a single adapter: set experts = k = 1",
                self.variant
            ));
        }
        Ok(())
    }

    fn scale_rank(&self) -> f64 {
        match self.scale_denominator {
            ScaleDenominator::ExpertRank => self.expert_rank() as f64,
            ScaleDenominator::TotalRank => self.rank as f64,
            ScaleDenominator::Rho => self.rho,
        }
    }
}

/// `s = √(3·n·η / r)`: the scale that makes the expected equivalent
/// gradient of a Kaiming-initialised adapter equal `η·g`.
pub fn theoretical_scale(n: usize, eta: f64, r: f64) -> Result<f64> {
    if n == 0 {
        return domain("input dimension must be at least 1");
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return domain(format!("eta must be positive, got {eta}"));
    }
    if !(r > 0.0 && r.is_finite()) {
        return domain(format!("rank must be positive, got {r}"));
    }
    Ok((3.0 * n as f64 * eta / r).sqrt())
}

/// `sᵢ = s₁·√(σ₀/σᵢ)` where `σᵢ` is expert `i`'s singular-value sum.
pub fn goat_s_scales(segment_sums: &[f64], s1: f64) -> Result<Vec<f64>> {
    if !(s1 > 0.0 && s1.is_finite()) {
        return domain(format!("base scale must be positive, got {s1}"));
    }
    let Some(&first) = segment_sums.first() else {
        return domain("no segments");
    };
    if segment_sums.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return domain("segment singular-value sums must be positive (degenerate spectrum)");
    }
    Ok(segment_sums
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == 0 { s1 } else { s1 * (first / v).sqrt() })
        .collect())
}

/// `W_res = (s/E)·Σᵢ bⁱaⁱ`.
pub fn compute_w_res(experts: &[ExpertPair], s: f64, e: usize) -> Result<Matrix> {
    let scales = vec![s; experts.len()];
    compute_w_res_scaled(experts, &scales, e)
}

/// `W_res = (1/E)·Σᵢ sᵢ·bⁱaⁱ`.
pub fn compute_w_res_scaled(experts: &[ExpertPair], scales: &[f64], e: usize) -> Result<Matrix> {
    let Some(first) = experts.first() else {
        return domain("no experts");
    };
    if e == 0 || scales.len() != experts.len() {
        return domain("expert count and scales must match");
    }
    let (m, n) = first.out_in();
    let mut out = Matrix::zeros(m, n);
    for (p, &s) in experts.iter().zip(scales) {
        if p.out_in() != (m, n) {
            return Err(GoatError::Shape {
                op: "residual weight",
                left: p.out_in(),
                right: (m, n),
            });
        }
        out.add_scaled(s / e as f64, &p.product())?;
    }
    Ok(out)
}

pub fn build_goat_layer(w0: &Matrix, cfg: &LayerConfig, rng: &mut Rng) -> Result<GoatLayer> {
    cfg.validate()?;
    w0.ensure_finite("pretrained weight")?;
    let (m, n) = w0.shape();
    let h = m.min(n);
    if cfg.rank > h {
        return domain(format!("rank {} exceeds min({m}, {n})", cfg.rank));
    }
    let router = Router::random(cfg.experts, n, cfg.k, &mut rng.split(ROUTER_STREAM))?;
    let e = cfg.experts;
    let d = cfg.expert_rank();

    let (experts, scales, w_base, segments, strategy) = match cfg.variant {
        Variant::Goat | Variant::GoatS => {
            let factors = svd(w0)?;
            let segments = make_segments(
                m,
                n,
                e,
                cfg.rank,
                cfg.strategy,
                &mut rng.split(SEGMENT_STREAM),
            )?;
            let s1 = theoretical_scale(n, cfg.eta, cfg.scale_rank())?;
            let scales = if cfg.variant == Variant::GoatS {
                let sums: Vec<f64> = segments
                    .iter()
                    .map(|seg| factors.sigma[seg.start..seg.end()].iter().sum())
                    .collect();
                goat_s_scales(&sums, s1)?
            } else {
                vec![s1; e]
            };
            let experts = segments
                .iter()
                .zip(&scales)
                .map(|(seg, &s)| build_expert(&factors, *seg, s, cfg.rho))
                .collect::<Result<Vec<_>>>()?;
            let w_res = compute_w_res_scaled(&experts, &scales, e)?;
            (
                experts,
                scales,
                w0.sub(&w_res)?,
                segments,
                Some(cfg.strategy),
            )
        }
        Variant::ZeroMoE => {
            let experts = (0..e)
                .map(|i| {
                    let mut sub = rng.split(EXPERT_STREAM + i as u64);
                    let a = kaiming_uniform(&mut sub, d, n, n)?;
                    ExpertPair::new(Matrix::zeros(m, d), a, ExpertSource::ZeroInit)
                })
                .collect::<Result<Vec<_>>>()?;
            (
                experts,
                vec![cfg.zero_init_scale; e],
                w0.clone(),
                vec![],
                None,
            )
        }
        Variant::PiSSA | Variant::MiLoRA => {
            let which = if cfg.variant == Variant::PiSSA {
                SingleLoraVariant::PiSSA
            } else {
                SingleLoraVariant::MiLoRA
            };
            let s = theoretical_scale(n, cfg.eta, cfg.scale_rank())?;
            let (pair, frozen) = build_single_lora_init(&svd(w0)?, which, cfg.rank, s)?;
            let seg = match &pair.source {
                ExpertSource::Segment(seg) => vec![*seg],
                ExpertSource::ZeroInit => vec![],
            };
            (vec![pair], vec![s], frozen, seg, None)
        }
    };

    let meta = LayerMeta {
        variant: cfg.variant,
        strategy,
        rank: cfg.rank,
        seed: rng.seed(),
        segments,
    };
    GoatLayer::new(
        w_base,
        experts,
        router,
        scales,
        cfg.rho,
        cfg.balance_coeff,
        meta,
    )
}
