//! Closed-form parameter and forward-FLOPs accounting for adapter methods on
//! three reference backbones.
//!
//! Formulas are transcribed as published, fractional head and FFN ratios
//! included. Proportions are reported against each backbone's own
//! full-fine-tuning total and compared at the precision they are displayed
//! with, by truncation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, GoatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    RobertaLarge,
    VitBase,
    Llama2_7b,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [
        Backbone::RobertaLarge,
        Backbone::VitBase,
        Backbone::Llama2_7b,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RobertaLarge => "roberta-large",
            Self::VitBase => "vit-base",
            Self::Llama2_7b => "llama2-7b",
        }
    }

    /// Preset dimensions; 8 experts with 2 active.
    pub fn spec(self) -> BackboneSpec {
        let (h, l, v, r, p, c) = match self {
            Self::RobertaLarge => (1024, 24, Some(50265), 32, None, None),
            Self::VitBase => (768, 12, None, 8, Some(32), Some(3)),
            Self::Llama2_7b => (4096, 32, Some(32000), 32, None, None),
        };
        BackboneSpec {
            backbone: self,
            h,
            l,
            v,
            r,
            e: 8,
            k: 2,
            p,
            c,
            s_len: None,
            batch: None,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|b| b.name()).collect();
                GoatError::Domain(format!(
                    "unknown backbone {s:?}; expected one of {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    FullFt,
    FullFtMoE,
    LoRA,
    PiSSA,
    MiLoRA,
    RsLoRA,
    LoRADash,
    KaSA,
    DoRA,
    NEAT,
    MoLoRA,
    GOAT,
    HydraLoRA,
    AdaMoLE,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::FullFt,
        Method::FullFtMoE,
        Method::LoRA,
        Method::PiSSA,
        Method::MiLoRA,
        Method::RsLoRA,
        Method::LoRADash,
        Method::KaSA,
        Method::DoRA,
        Method::NEAT,
        Method::MoLoRA,
        Method::GOAT,
        Method::HydraLoRA,
        Method::AdaMoLE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FullFt => "full-ft",
            Self::FullFtMoE => "full-ft-moe",
            Self::LoRA => "lora",
            Self::PiSSA => "pissa",
            Self::MiLoRA => "milora",
            Self::RsLoRA => "rslora",
            Self::LoRADash => "lora-dash",
            Self::KaSA => "kasa",
            Self::DoRA => "dora",
            Self::NEAT => "neat",
            Self::MoLoRA => "molora",
            Self::GOAT => "goat",
            Self::HydraLoRA => "hydralora",
            Self::AdaMoLE => "adamole",
        }
    }

    /// Mixture methods with a LoRA-MoE forward cost.
    pub fn is_lora_moe(self) -> bool {
        matches!(self, Self::MoLoRA | Self::GOAT | Self::HydraLoRA)
    }

    fn supported_on(self, b: Backbone) -> bool {
        match self {
            Self::FullFtMoE => b != Backbone::Llama2_7b,
            Self::RsLoRA => b == Backbone::RobertaLarge,
            Self::LoRADash | Self::KaSA | Self::NEAT => b == Backbone::Llama2_7b,
            _ => true,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let alias = match lower.as_str() {
            "moe-lora" => "molora",
            "fft" => "full-ft",
            "fft-moe" => "full-ft-moe",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                GoatError::Domain(format!(
                    "unknown method {s:?}; expected one of {} (or lora-r<rank>)",
                    valid.join(", ")
                ))
            })
    }
}

/// A method name with an optional rank override, e.g. `lora-r32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodQuery {
    pub method: Method,
    pub rank: Option<usize>,
}

impl FromStr for MethodQuery {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some((head, tail)) = s.rsplit_once("-r") {
            if let (Ok(method), Ok(rank)) = (head.parse::<Method>(), tail.parse::<usize>()) {
                return Ok(Self {
                    method,
                    rank: Some(rank),
                });
            }
        }
        Ok(Self {
            method: s.parse()?,
            rank: None,
        })
    }
}

impl fmt::Display for MethodQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank {
            Some(r) => write!(f, "{}-r{r}", self.method),
            None => write!(f, "{}", self.method),
        }
    }
}

/// Backbone dimensions. `p`/`c` apply to ViT only; `s_len`/`batch` are
/// needed for FLOPs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone: Backbone,
    pub h: usize,
    pub l: usize,
    pub v: Option<usize>,
    /// Total adapter rank.
    pub r: usize,
    pub e: usize,
    pub k: usize,
    pub p: Option<usize>,
    pub c: Option<usize>,
    pub s_len: Option<usize>,
    pub batch: Option<usize>,
}

impl BackboneSpec {
    pub fn d(&self) -> usize {
        self.r / self.e.max(1)
    }

    pub fn with_sequence(mut self, s_len: usize, batch: usize) -> Self {
        self.s_len = Some(s_len);
        self.batch = Some(batch);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("H", self.h),
            ("L", self.l),
            ("r", self.r),
            ("e", self.e),
            ("k", self.k),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return domain(format!("{name} must be at least 1"));
        }
        if !self.r.is_multiple_of(self.e) {
            return domain(format!("r = {} is not divisible by e = {}", self.r, self.e));
        }
        if self.k > self.e {
            return domain(format!("k = {} exceeds e = {}", self.k, self.e));
        }
        let needs_vocab = self.backbone != Backbone::VitBase;
        if needs_vocab && self.v.is_none() {
            return domain(format!("{} needs a vocabulary size", self.backbone));
        }
        if !needs_vocab && (self.p.is_none() || self.c.is_none()) {
            return domain("vit-base needs patch size and channels");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub backbone: Backbone,
    pub method: MethodQuery,
    /// Full-fine-tuning parameter count of the backbone.
    pub total_params: f64,
    pub trainable_params: f64,
    /// `100·trainable/total`, unrounded.
    pub proportion: f64,
    pub flops: Option<f64>,
}

impl CostReport {
    /// Proportion truncated to two decimals.
    pub fn display_proportion(&self) -> String {
        format_truncated(self.proportion, 2)
    }
}

/// Truncate `value` to `decimals` places and format it.
pub fn format_truncated(value: f64, decimals: usize) -> String {
    let scale = 10f64.powi(decimals as i32);
    // Guard against representation error just below a boundary.
    let t = (value * scale + 1e-9).floor() / scale;
    format!("{t:.decimals$}")
}

/// True when `value` truncated to the precision of `shown` prints as `shown`.
pub fn matches_displayed(value: f64, shown: &str) -> bool {
    let decimals = shown.split_once('.').map_or(0, |(_, frac)| frac.len());
    format_truncated(value, decimals) == shown
}

fn full_ft_total(spec: &BackboneSpec) -> f64 {
    let h = spec.h as f64;
    let l = spec.l as f64;
    match spec.backbone {
        Backbone::RobertaLarge => (12.0 * h * h + 13.0 * h) * l + spec.v.unwrap_or(0) as f64 * h,
        Backbone::VitBase => vit_frame(spec) + (12.0 * h * h + 2.0 * h) * l,
        Backbone::Llama2_7b => {
            (10.25 * h * h + 2.0 * h) * l + h + 2.0 * spec.v.unwrap_or(0) as f64 * h
        }
    }
}

/// ViT parameters outside the encoder stack: patch embedding, final norm and pooler.
fn vit_frame(spec: &BackboneSpec) -> f64 {
    let h = spec.h as f64;
    let p = spec.p.unwrap_or(0) as f64;
    let c = spec.c.unwrap_or(0) as f64;
    (c + 1.0) * p * p * h + 3.0 * h + p * h + h * h
}

fn trainable(spec: &BackboneSpec, method: Method, r: f64) -> f64 {
    let h = spec.h as f64;
    let l = spec.l as f64;
    let e = spec.e as f64;
    // Coefficients: LoRA weight, router, DoRA magnitude per layer.
    let (lora, router, dora) = match spec.backbone {
        Backbone::RobertaLarge | Backbone::VitBase => (18.0, 9.0, 6.0),
        Backbone::Llama2_7b => (11.58, 6.66, 5.0),
    };
    match method {
        Method::FullFt => full_ft_total(spec),
        Method::FullFtMoE => {
            let layers = (12.0 * e * h * h + 2.0 * h + 9.0 * h * e) * l;
            match spec.backbone {
                Backbone::VitBase => vit_frame(spec) + layers,
                _ => layers + spec.v.unwrap_or(0) as f64 * h,
            }
        }
        Method::LoRA
        | Method::PiSSA
        | Method::MiLoRA
        | Method::RsLoRA
        | Method::LoRADash
        | Method::KaSA => lora * h * r * l,
        Method::DoRA => (lora * h * r + dora) * l,
        Method::NEAT => (lora * h * r + 10.0 * r * r) * l,
        Method::MoLoRA | Method::GOAT => (lora * h * r + router * h * e) * l,
        Method::HydraLoRA => match spec.backbone {
            Backbone::Llama2_7b => (4.91 * h * r + 6.66 * h * r / e + 6.66 * h * e) * l,
            _ => (9.0 * h * r + 9.0 * h * e + 9.0 * h * r / e) * l,
        },
        Method::AdaMoLE => (lora * h * r + router * h * e + router * h) * l,
    }
}

/// Parameter accounting of `query` on `spec`. FLOPs are filled in when the
/// spec carries sequence fields and the method has a forward-cost formula.
pub fn param_count(spec: &BackboneSpec, query: MethodQuery) -> Result<CostReport> {
    spec.validate()?;
    if !query.method.supported_on(spec.backbone) {
        return domain(format!(
            "no parameter formula for {} on {}",
            query.method, spec.backbone
        ));
    }
    let r = query.rank.unwrap_or(spec.r);
    if r == 0 {
        return domain("rank must be at least 1");
    }
    let total = full_ft_total(spec);
    let count = trainable(spec, query.method, r as f64);
    let flops = match (spec.s_len, spec.batch) {
        (Some(_), Some(_)) if query.method == Method::FullFtMoE || query.method.is_lora_moe() => {
            Some(flops_estimate(spec, query.method)?)
        }
        _ => None,
    };
    Ok(CostReport {
        backbone: spec.backbone,
        method: query,
        total_params: total,
        trainable_params: count,
        proportion: 100.0 * count / total,
        flops,
    })
}

/// Forward FLOPs (two per multiply-accumulate) of a fully upcycled MoE or a
/// LoRA-MoE. Backbones without a vocabulary contribute no vocabulary term.
pub fn flops_estimate(spec: &BackboneSpec, method: Method) -> Result<f64> {
    spec.validate()?;
    let (Some(s), Some(b)) = (spec.s_len, spec.batch) else {
        return domain("FLOPs need sequence length and batch size");
    };
    let (s, b) = (s as f64, b as f64);
    let h = spec.h as f64;
    let l = spec.l as f64;
    let e = spec.e as f64;
    let k = spec.k as f64;
    let v = spec.v.unwrap_or(0) as f64;
    let shared = 52.0 / 3.0 * e * s * h + 4.0 * s * s * h;
    let vocab = 2.0 * b * s * h * v;
    match method {
        Method::FullFtMoE => Ok(b * l * (shared + 41.0 / 2.0 * k * s * h * h) + vocab),
        m if m.is_lora_moe() => {
            let d = spec.d() as f64;
            Ok(b * l * (shared + 41.0 / 2.0 * s * h * h + 69.0 / 2.0 * k * s * h * d) + vocab)
        }
        m => domain(format!("no FLOPs formula for {m}")),
    }
}

/// A published proportion: backbone, method (with rank override) and the
/// value exactly as displayed.
#[derive(Clone, Copy, Debug)]
pub struct PublishedProportion {
    pub backbone: Backbone,
    pub method: &'static str,
    pub shown: &'static str,
}

const fn pp(backbone: Backbone, method: &'static str, shown: &'static str) -> PublishedProportion {
    PublishedProportion {
        backbone,
        method,
        shown,
    }
}

pub const PUBLISHED: &[PublishedProportion] = &[
    pp(Backbone::RobertaLarge, "full-ft-moe", "698"),
    pp(Backbone::RobertaLarge, "lora", "4.00"),
    pp(Backbone::RobertaLarge, "pissa", "4.00"),
    pp(Backbone::RobertaLarge, "milora", "4.00"),
    pp(Backbone::RobertaLarge, "rslora", "4.00"),
    pp(Backbone::RobertaLarge, "dora", "4.00"),
    pp(Backbone::RobertaLarge, "molora", "4.50"),
    pp(Backbone::RobertaLarge, "goat", "4.50"),
    pp(Backbone::RobertaLarge, "hydralora", "2.75"),
    pp(Backbone::RobertaLarge, "adamole", "4.56"),
    pp(Backbone::VitBase, "full-ft-moe", "770"),
    pp(Backbone::VitBase, "lora", "1.49"),
    pp(Backbone::VitBase, "pissa", "1.49"),
    pp(Backbone::VitBase, "milora", "1.49"),
    pp(Backbone::VitBase, "lora-r16", "2.99"),
    pp(Backbone::VitBase, "lora-r32", "5.98"),
    pp(Backbone::VitBase, "dora", "1.49"),
    pp(Backbone::VitBase, "molora", "2.24"),
    pp(Backbone::VitBase, "goat", "2.24"),
    pp(Backbone::VitBase, "hydralora", "1.58"),
    pp(Backbone::VitBase, "adamole", "2.33"),
    pp(Backbone::Llama2_7b, "lora", "0.84"),
    pp(Backbone::Llama2_7b, "pissa", "0.84"),
    pp(Backbone::Llama2_7b, "milora", "0.84"),
    pp(Backbone::Llama2_7b, "lora-dash", "0.84"),
    pp(Backbone::Llama2_7b, "kasa", "0.84"),
    pp(Backbone::Llama2_7b, "dora", "0.84"),
    pp(Backbone::Llama2_7b, "neat", "0.84"),
    pp(Backbone::Llama2_7b, "molora", "0.96"),
    pp(Backbone::Llama2_7b, "goat", "0.96"),
    pp(Backbone::Llama2_7b, "hydralora", "0.84"),
    pp(Backbone::Llama2_7b, "adamole", "0.97"),
];

/// One published proportion recomputed from the preset.
#[derive(Clone, Debug, Serialize)]
pub struct RegressionRow {
    pub backbone: Backbone,
    pub method: String,
    pub shown: String,
    pub computed: f64,
    pub matches: bool,
}

pub fn regression_table() -> Result<Vec<RegressionRow>> {
    PUBLISHED
        .iter()
        .map(|p| {
            let report = param_count(&p.backbone.spec(), p.method.parse()?)?;
            Ok(RegressionRow {
                backbone: p.backbone,
                method: p.method.to_string(),
                shown: p.shown.to_string(),
                computed: report.proportion,
                matches: matches_displayed(report.proportion, p.shown),
            })
        })
        .collect()
}

/// Every supported method on every backbone preset.
pub fn cost_table() -> Vec<CostReport> {
    Backbone::ALL
        .into_iter()
        .flat_map(|b| {
            let spec = b.spec();
            Method::ALL.into_iter().filter_map(move |m| {
                param_count(
                    &spec,
                    MethodQuery {
                        method: m,
                        rank: None,
                    },
                )
                .ok()
            })
        })
        .collect()
}
