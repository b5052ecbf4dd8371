//! Seeded randomness.
//!
//! Every draw in the crate goes through [`Rng`], a ChaCha8 generator keyed
//! by a 64-bit seed and a 64-bit stream id. ChaCha output is specified
//! bit-for-bit, so a seed reproduces the same sequence on every platform.
//! [`Rng::split`] derives an independent sub-stream from the parent's seed
//! and stream id only, never from how many values the parent has drawn.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Result};
use crate::numkit::Matrix;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on sub-stream `label` of this generator's stream.
    pub fn split(&self, label: u64) -> Rng {
        let stream = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(label.wrapping_add(1));
        Self::with_stream(self.seed, stream)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.standard_normal()).collect()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.standard_normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `amount` distinct indices from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, amount: usize) -> Result<Vec<usize>> {
        if amount > n {
            return domain(format!("cannot draw {amount} distinct values from {n}"));
        }
        Ok(rand::seq::index::sample(&mut self.inner, n, amount).into_vec())
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Kaiming-uniform sampler with the leaky-ReLU `negative_slope` convention:
/// entries are i.i.d. `U(-b, b)` with `b = sqrt(6 / ((1 + a²) · fan_in))`.
pub fn kaiming_uniform_with_slope(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    negative_slope: f64,
) -> Result<Matrix> {
    if fan_in == 0 {
        return domain("kaiming_uniform needs fan_in >= 1");
    }
    let bound = (6.0 / ((1.0 + negative_slope * negative_slope) * fan_in as f64)).sqrt();
    Ok(rng.uniform_matrix(rows, cols, -bound, bound))
}

/// Default LoRA `A` initializer: negative slope `√5`, so the bound is
/// `1/√fan_in` and the entry variance is `1/(3·fan_in)`.
pub fn kaiming_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Result<Matrix> {
    kaiming_uniform_with_slope(rng, rows, cols, fan_in, 5f64.sqrt())
}
