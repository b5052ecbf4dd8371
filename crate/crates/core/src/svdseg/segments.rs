use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, GoatError, Result};
use crate::numkit::{Matrix, Rng, SvdFactors};

/// How expert segments are placed along the spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentStrategy {
    /// Evenly spread: expert `j` starts at `(j-1)·t`, `t = ⌊h/E⌋`.
    #[serde(rename = "O")]
    Ours,
    /// Packed at the top of the spectrum.
    #[serde(rename = "P")]
    Principal,
    /// Packed at the bottom of the spectrum.
    #[serde(rename = "M")]
    Minor,
    /// Random distinct cells of width `d`.
    #[serde(rename = "R")]
    Random,
}

impl SegmentStrategy {
    pub const ALL: [SegmentStrategy; 4] = [Self::Ours, Self::Principal, Self::Minor, Self::Random];

    pub fn code(self) -> &'static str {
        match self {
            Self::Ours => "O",
            Self::Principal => "P",
            Self::Minor => "M",
            Self::Random => "R",
        }
    }
}

impl fmt::Display for SegmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SegmentStrategy {
    type Err = GoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o" | "ours" => Ok(Self::Ours),
            "p" | "principal" => Ok(Self::Principal),
            "m" | "minor" => Ok(Self::Minor),
            "r" | "random" => Ok(Self::Random),
            _ => domain(format!(
                "unknown segment strategy {s:?} (expected O, P, M or R)"
            )),
        }
    }
}

/// One expert's band of singular triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub start: usize,
    pub width: usize,
    pub strategy: SegmentStrategy,
    /// 1-based expert number.
    pub expert_index: usize,
}

impl SegmentSpec {
    pub fn end(&self) -> usize {
        self.start + self.width
    }

    pub fn overlaps(&self, other: &SegmentSpec) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExpertSource {
    Segment(SegmentSpec),
    ZeroInit,
}

/// Low-rank factors of one expert: `b` is `m×d`, `a` is `d×n`.
#[derive(Clone, Debug)]
pub struct ExpertPair {
    pub b: Matrix,
    pub a: Matrix,
    pub rank: usize,
    pub source: ExpertSource,
}

impl ExpertPair {
    pub fn new(b: Matrix, a: Matrix, source: ExpertSource) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(GoatError::Shape {
                op: "expert pair",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(Self {
            rank: b.cols(),
            b,
            a,
            source,
        })
    }

    /// Dense product `b·a`.
    pub fn product(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("pair shapes checked at construction")
    }

    /// `(m, n)` of the map the pair adapts.
    pub fn out_in(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }
}

/// Segment placement for `E` experts of rank `d = r/E` on an `m×n` weight.
pub fn make_segments(
    m: usize,
    n: usize,
    experts: usize,
    r: usize,
    strategy: SegmentStrategy,
    rng: &mut Rng,
) -> Result<Vec<SegmentSpec>> {
    let h = m.min(n);
    if experts == 0 {
        return domain("expert count must be at least 1");
    }
    if r == 0 || !r.is_multiple_of(experts) {
        return domain(format!("expert count {experts} must divide total rank {r}"));
    }
    let d = r / experts;
    let t = h / experts;
    if d > t {
        return domain(format!(
            "per-expert rank {d} exceeds segment stride {t} = floor(min({m},{n})/{experts})"
        ));
    }
    let starts: Vec<usize> = match strategy {
        SegmentStrategy::Ours => (0..experts).map(|j| j * t).collect(),
        SegmentStrategy::Principal => (0..experts).map(|j| j * d).collect(),
        SegmentStrategy::Minor => (1..=experts).map(|j| h - j * d).collect(),
        SegmentStrategy::Random => {
            let cells = h / d;
            rng.sample_without_replacement(cells, experts)?
                .into_iter()
                .map(|c| c * d)
                .collect()
        }
    };
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(j, start)| SegmentSpec {
            start,
            width: d,
            strategy,
            expert_index: j + 1,
        })
        .collect())
}

/// Expert factors from a spectral segment:
/// `b = (sρ)^{-1/2} U'Σ'^{1/2}`, `a = (sρ)^{-1/2} Σ'^{1/2} V'ᵀ`,
/// so that `s·b·a = U'Σ'V'ᵀ / ρ`.
pub fn build_expert(
    factors: &SvdFactors,
    spec: SegmentSpec,
    s: f64,
    rho: f64,
) -> Result<ExpertPair> {
    if !(s > 0.0 && s.is_finite()) {
        return domain(format!("scaling s must be positive, got {s}"));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return domain(format!("damping rho must be positive, got {rho}"));
    }
    let h = factors.rank_bound();
    if spec.width == 0 || spec.end() > h {
        return domain(format!(
            "segment {}..{} outside spectrum of length {h}",
            spec.start,
            spec.end()
        ));
    }
    let damp = (1.0 / (s * rho)).sqrt();
    let roots: Vec<f64> = factors.sigma[spec.start..spec.end()]
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let u = factors.u.col_block(spec.start, spec.width)?;
    let v = factors.v.col_block(spec.start, spec.width)?;
    let b = Matrix::from_fn(u.rows(), spec.width, |i, j| damp * u.get(i, j) * roots[j]);
    let a = Matrix::from_fn(spec.width, v.rows(), |i, j| damp * roots[i] * v.get(j, i));
    ExpertPair::new(b, a, ExpertSource::Segment(spec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingleLoraVariant {
    /// Adapter on the top-r triples.
    PiSSA,
    /// Adapter on the bottom-r triples.
    MiLoRA,
}

/// Single-adapter SVD initialization. Returns the adapter and the frozen
/// remainder of the spectrum, with `frozen + s·b·a = W₀`.
pub fn build_single_lora_init(
    factors: &SvdFactors,
    variant: SingleLoraVariant,
    r: usize,
    s: f64,
) -> Result<(ExpertPair, Matrix)> {
    let h = factors.rank_bound();
    if r == 0 || r > h {
        return domain(format!("adapter rank must be in 1..={h}, got {r}"));
    }
    let start = match variant {
        SingleLoraVariant::PiSSA => 0,
        SingleLoraVariant::MiLoRA => h - r,
    };
    let spec = SegmentSpec {
        start,
        width: r,
        strategy: match variant {
            SingleLoraVariant::PiSSA => SegmentStrategy::Principal,
            SingleLoraVariant::MiLoRA => SegmentStrategy::Minor,
        },
        expert_index: 1,
    };
    let pair = build_expert(factors, spec, s, 1.0)?;
    // Frozen part is the complement of the adapter's band.
    let (m, n) = factors.shape();
    let mut frozen = Matrix::zeros(m, n);
    if start > 0 {
        frozen = frozen.add(&factors.reconstruct_range(0, start)?)?;
    }
    if start + r < h {
        frozen = frozen.add(&factors.reconstruct_range(start + r, h - start - r)?)?;
    }
    Ok((pair, frozen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::svd;

    fn starts(v: &[SegmentSpec]) -> Vec<usize> {
        v.iter().map(|s| s.start).collect()
    }

    #[test]
    fn strategy_starts() {
        let mut rng = Rng::new(0);
        let ours = make_segments(8, 8, 2, 4, SegmentStrategy::Ours, &mut rng).unwrap();
        assert_eq!(starts(&ours), vec![0, 4]);
        let p = make_segments(8, 8, 2, 4, SegmentStrategy::Principal, &mut rng).unwrap();
        assert_eq!(starts(&p), vec![0, 2]);
        let m = make_segments(8, 8, 2, 4, SegmentStrategy::Minor, &mut rng).unwrap();
        assert_eq!(starts(&m), vec![6, 4]);
        assert!(ours.iter().all(|s| s.width == 2));
    }

    #[test]
    fn single_expert_covers_spectrum() {
        for strategy in SegmentStrategy::ALL {
            let segs = make_segments(5, 7, 1, 5, strategy, &mut Rng::new(3)).unwrap();
            assert_eq!(segs.len(), 1);
            assert_eq!((segs[0].start, segs[0].width), (0, 5));
        }
    }

    #[test]
    fn divisibility_errors() {
        let mut rng = Rng::new(0);
        assert!(make_segments(8, 8, 3, 4, SegmentStrategy::Ours, &mut rng).is_err());
        // d = 4 > t = floor(8/2)... fine; d = 5 > t = 4 is not
        assert!(make_segments(8, 8, 2, 10, SegmentStrategy::Ours, &mut rng).is_err());
        assert!(make_segments(8, 8, 0, 4, SegmentStrategy::Ours, &mut rng).is_err());
    }

    #[test]
    fn non_divisible_shape_truncates_stride() {
        let segs = make_segments(10, 7, 3, 6, SegmentStrategy::Ours, &mut Rng::new(0)).unwrap();
        assert_eq!(starts(&segs), vec![0, 2, 4]);
    }

    #[test]
    fn random_is_seeded_and_disjoint() {
        let a = make_segments(32, 32, 8, 16, SegmentStrategy::Random, &mut Rng::new(9)).unwrap();
        let b = make_segments(32, 32, 8, 16, SegmentStrategy::Random, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        for (i, x) in a.iter().enumerate() {
            for y in &a[i + 1..] {
                assert!(!x.overlaps(y));
            }
        }
    }

    #[test]
    fn expert_reconstructs_segment() {
        let w = Matrix::diag(&[4.0, 1.0]);
        let f = svd(&w).unwrap();
        let spec = SegmentSpec {
            start: 0,
            width: 2,
            strategy: SegmentStrategy::Principal,
            expert_index: 1,
        };
        let pair = build_expert(&f, spec, 4.0, 1.0).unwrap();
        let rec = pair.product().scale(4.0);
        assert!(rec.sub(&w).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn damping_scales_product() {
        let f = svd(&Rng::new(2).normal_matrix(6, 6, 1.0)).unwrap();
        let spec = SegmentSpec {
            start: 2,
            width: 2,
            strategy: SegmentStrategy::Ours,
            expert_index: 2,
        };
        let n1 = build_expert(&f, spec, 3.0, 1.0)
            .unwrap()
            .product()
            .frobenius_norm();
        let n10 = build_expert(&f, spec, 3.0, 10.0)
            .unwrap()
            .product()
            .frobenius_norm();
        assert!((n1 / n10 - 10.0).abs() < 1e-10);

        let p2 = build_expert(&f, spec, 2.0, 1.0)
            .unwrap()
            .product()
            .scale(2.0);
        let p8 = build_expert(&f, spec, 8.0, 1.0)
            .unwrap()
            .product()
            .scale(8.0);
        assert!(p2.sub(&p8).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn expert_rejects_bad_parameters() {
        let f = svd(&Matrix::identity(2)).unwrap();
        let spec = SegmentSpec {
            start: 1,
            width: 2,
            strategy: SegmentStrategy::Ours,
            expert_index: 1,
        };
        assert!(build_expert(&f, spec, 1.0, 1.0).is_err());
        let ok = SegmentSpec { start: 0, ..spec };
        assert!(build_expert(&f, ok, 0.0, 1.0).is_err());
        assert!(build_expert(&f, ok, 1.0, -1.0).is_err());
    }

    #[test]
    fn pissa_residual_on_diagonal() {
        let w = Matrix::diag(&[4.0, 3.0, 2.0, 1.0]);
        let f = svd(&w).unwrap();
        let (pair, frozen) = build_single_lora_init(&f, SingleLoraVariant::PiSSA, 2, 2.0).unwrap();
        assert!(
            frozen
                .sub(&Matrix::diag(&[0.0, 0.0, 2.0, 1.0]))
                .unwrap()
                .max_abs()
                < 1e-15
        );
        let total = frozen.add(&pair.product().scale(2.0)).unwrap();
        assert!(total.sub(&w).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn full_rank_adapter_freezes_nothing() {
        let w = Rng::new(5).normal_matrix(4, 6, 1.0);
        let f = svd(&w).unwrap();
        for variant in [SingleLoraVariant::PiSSA, SingleLoraVariant::MiLoRA] {
            let (pair, frozen) = build_single_lora_init(&f, variant, 4, 3.0).unwrap();
            assert_eq!(frozen.max_abs(), 0.0);
            let rec = pair.product().scale(3.0);
            assert!(rec.sub(&w).unwrap().frobenius_norm() < 1e-9);
        }
    }

    #[test]
    fn zero_singular_values_give_zero_factors() {
        let w = Matrix::diag(&[2.0, 0.0]);
        let f = svd(&w).unwrap();
        let (pair, frozen) = build_single_lora_init(&f, SingleLoraVariant::MiLoRA, 1, 1.0).unwrap();
        assert_eq!(pair.product().max_abs(), 0.0);
        assert!(frozen.sub(&w).unwrap().max_abs() < 1e-15);
    }
}
