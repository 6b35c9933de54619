//! Calibration of computer models by projected-kernel smoothing.
//!
//! The crate estimates calibration parameters `theta` of a simulator
//! `y_s(x, theta)` from noisy field observations `y_i = zeta(x_i) + e_i`.
//! The estimand is the L2 projection `theta*`, the minimizer of
//! `||zeta - y_s(., theta)||_{L2(Omega)}`. The core device is the projected
//! kernel `K_G`: the covariance left after removing, in both arguments, the
//! L2 projection onto the span `G_theta` of the simulator's
//! theta-sensitivities. Penalized regression with `K_G` yields an estimator
//! that stays orthogonal to `G_theta` by construction, and the same
//! quadratic form doubles as a posterior for credible regions.
//!
//! Module map:
//! - [`domain`]: the experimental region, quadrature rules, L2 inner
//!   products, and Gram-Schmidt orthonormalization.
//! - [`kernel`]: stationary covariance families and their spectral densities.
//! - [`projection`]: the projected kernel, projection operators, and their
//!   diagnostic probes.
//! - [`model`]: the simulator abstraction, built-in analytic models, and a
//!   line-protocol client for external simulator processes.
//! - [`optim`]: bounded Nelder-Mead with multi-start.
//! - [`calibrate`]: the profile solver, GCV, and the PK / L2 / KO-mode fits.
//! - [`bayes`]: marginal posteriors, adaptive Metropolis sampling, and
//!   credible regions.
//! - [`study`]: synthetic scenarios, oracle targets, and Monte-Carlo study
//!   harnesses.

// `!(x > 0.0)` rejects NaN along with nonpositive values; `x <= 0.0` would
// let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod calibrate;
pub mod domain;
mod error;
mod gauss;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod projection;
mod sobol;
pub mod study;

pub use error::{Error, Result};

use std::sync::Arc;

/// A real-valued function on the experimental region, shared across threads.
pub type RealFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Wraps a closure as a [`RealFn`].
pub fn real_fn<F>(f: F) -> RealFn
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}

/// SplitMix64 step, used to derive independent per-task seeds from a master
/// seed and a counter. Counter-based so parallel tasks stay deterministic.
pub(crate) fn split_seed(master: u64, counter: u64) -> u64 {
    let mut z = master.wrapping_add(counter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
