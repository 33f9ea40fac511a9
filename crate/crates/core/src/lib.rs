//! Numerical laboratory for forgetting in mixture-model post-training.
//!
//! The learner and target are equal-covariance Gaussian mixtures. The crate
//! evaluates forward and reverse KL objectives, their gradients and the
//! overlap bounds that gate cross-mode influence, integrates the gradient
//! flows, and checks every closed form against an independent oracle
//! (projected Gauss-Hermite quadrature, Monte Carlo, finite differences).
//!
//! Layout:
//!
//! - [`mixture`]: densities, responsibilities, separation, sampling.
//! - [`estimators`]: quadrature, Monte Carlo, finite differences, f-generators.
//! - [`objectives`]: SFT and reverse-KL losses, gradients, drift, replay minimizers.
//! - [`flows`]: RK4 gradient flows and the local PL certificate.
//! - [`replay`]: replay-mixed behavior sampling with bounded importance weights.
//! - [`near_on_policy`]: EMA teacher distillation, entropic TTT objective, OAPL tilt.
//! - [`extensions`]: f-divergences, K-mode mixtures, 1D log-concave families.
//! - [`cli`]: scenario runner and check suites.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod extensions;
pub mod flows;
pub mod mixture;
pub mod near_on_policy;
pub mod objectives;
pub mod replay;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, Method};
pub use mixture::{CovarianceModel, LearnerParams, MixtureDensity};
