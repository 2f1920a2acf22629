//! Bayesian (maximum a posteriori) trajectory estimation for LTI systems
//! from noisy signal-matrix data.
//!
//! A length-`L` input-output trajectory `z⁰` is estimated from a linear
//! observation `ζ = Φ z⁰ + ε` and a signal matrix `H` of offline windows.
//! Smoothing, prediction and optimal control are all encoded as choices of
//! `(Φ, ζ, Σ_ε)` in [`tasks`]; the linear-combination vector `g` is fitted
//! by maximum marginal likelihood and the trajectory by a MAP step in
//! [`estimator`]. [`baselines`] holds the regularized predictor and DeePC
//! problems that coincide with the first SQP iterate under Gaussian,
//! uncorrelated noise.

pub mod baselines;
pub mod covariance;
pub mod error;
pub mod estimator;
pub mod lti;
pub mod numerics;
pub mod sigdata;
pub mod tasks;
pub mod uncertainty;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use nalgebra::{DMatrix, DVector};
