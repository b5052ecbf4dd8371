//! Dense linear algebra and randomness foundation.

mod grad;
mod io;
mod matrix;
mod rng;
mod svd;

pub use grad::finite_diff_grad;
pub use matrix::{dot, matmul, norm, Matrix};
pub use rng::{kaiming_uniform, kaiming_uniform_with_slope, Rng};
pub use svd::{svd, SvdFactors, MAX_SWEEPS, ORTHO_TOL};
