//! SVD-segmented LoRA mixture-of-experts.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: dense matrices, one-sided Jacobi SVD, seeded sampling and
//!   finite-difference gradients.
//! * [`svdseg`]: rank-r block decomposition of a pretrained weight and the
//!   construction of expert factors from spectral segments.
//! * [`moe`]: the mixture layer itself (router, residual-aligned base weight,
//!   forward/backward, balance loss, scaling rules).
//! * [`align`]: equivalent weight/gradient algebra, SGD trajectory comparison
//!   against dense references, and Monte-Carlo checks of routing statistics.
//! * [`costmodel`]: closed-form parameter and FLOPs accounting.
//! * [`verify`]: numbered property suites with measured-vs-expected reports.

pub mod align;
pub mod costmodel;
pub mod error;
pub mod moe;
pub mod numkit;
pub mod svdseg;
pub mod verify;

pub use error::{GoatError, Result};
pub use numkit::{Matrix, Rng, SvdFactors};
