//! Trajectory estimation: marginal-likelihood fit of `g`, then the MAP
//! trajectory under the prior `E(Hg, Σ_g(g))`.

mod hyper;
mod map;
mod marginal;

use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::covariance::PriorScale;
use crate::error::Result;
use crate::numerics::SolverOptions;
use crate::sigdata::SignalMatrix;
use crate::tasks::TaskSpec;
use crate::uncertainty::NoiseModel;

pub use hyper::{pinv_init, HyperEstimate, HyperMethod};
pub use map::{gaussian_map_pd, gaussian_map_singular, map_estimate};
pub use marginal::{LocalModel, MarginalProblem};

/// Negative log marginal likelihood of `g` and its gradient; `+∞` off the
/// hard-constraint set.
pub fn marginal_nll(
    task: &TaskSpec,
    h: &SignalMatrix,
    model_offline: &NoiseModel,
    g: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let prob = MarginalProblem::new(task, h, model_offline)?;
    Ok(prob.value_and_gradient(g))
}

pub fn estimate_g_nonlinear(
    task: &TaskSpec,
    h: &SignalMatrix,
    model_offline: &NoiseModel,
    opts: &SolverOptions,
) -> Result<HyperEstimate> {
    hyper::nonlinear(&MarginalProblem::new(task, h, model_offline)?, opts)
}

pub fn sqp_estimate_g(
    task: &TaskSpec,
    h: &SignalMatrix,
    model_offline: &NoiseModel,
    opts: &SolverOptions,
) -> Result<HyperEstimate> {
    hyper::sqp(&MarginalProblem::new(task, h, model_offline)?, opts)
}

pub fn one_iteration_estimate(
    task: &TaskSpec,
    h: &SignalMatrix,
    model_offline: &NoiseModel,
) -> Result<HyperEstimate> {
    hyper::one_iteration(&MarginalProblem::new(task, h, model_offline)?)
}

/// Per-phase wall-clock durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub setup_ms: f64,
    pub hyper_ms: f64,
    pub map_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub z_hat: DVector<f64>,
    pub g: HyperEstimate,
    pub prior_mean: DVector<f64>,
    pub sigma_g: PriorScale,
    pub residual_obs: DVector<f64>,
    pub residual_prior: DVector<f64>,
    pub timing: Timing,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Fits `g` by `method`, then returns the MAP trajectory with diagnostics.
pub fn run_algorithm1(
    task: &TaskSpec,
    h: &SignalMatrix,
    model_offline: &NoiseModel,
    method: HyperMethod,
    opts: &SolverOptions,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let prob = MarginalProblem::new(task, h, model_offline)?;
    let setup_ms = ms(start);
    let t = Instant::now();
    let g = match method {
        HyperMethod::Nonlinear => hyper::nonlinear(&prob, opts)?,
        HyperMethod::Sqp => hyper::sqp(&prob, opts)?,
        HyperMethod::OneIteration => hyper::one_iteration(&prob)?,
    };
    let hyper_ms = ms(t);
    let t = Instant::now();
    let sigma_g = prob.prior_scale(&g.g_hat).enforce_psd();
    let z_hat = map_estimate(task, h, &g.g_hat, &sigma_g, opts)?;
    let map_ms = ms(t);
    let prior_mean = &h.h * &g.g_hat;
    Ok(EstimateReport {
        residual_obs: &task.zeta - task.observe(&z_hat),
        residual_prior: &z_hat - &prior_mean,
        z_hat,
        g,
        prior_mean,
        sigma_g,
        timing: Timing { setup_ms, hyper_ms, map_ms, total_ms: ms(start) },
    })
}

#[derive(Serialize)]
struct HyperDoc<'a> {
    g_hat: &'a [f64],
    objective_trace: &'a [f64],
    method: HyperMethod,
    psi_at_g: Vec<Vec<f64>>,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    z_hat: &'a [f64],
    g: HyperDoc<'a>,
    prior_mean: &'a [f64],
    sigma_g: Vec<Vec<f64>>,
    residual_obs: &'a [f64],
    residual_prior: &'a [f64],
    timing: Timing,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl Serialize for EstimateReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ReportDoc {
            z_hat: self.z_hat.as_slice(),
            g: HyperDoc {
                g_hat: self.g.g_hat.as_slice(),
                objective_trace: &self.g.objective_trace,
                method: self.g.method,
                psi_at_g: rows(&self.g.psi_at_g),
                converged: self.g.converged,
                iterations: self.g.iterations,
            },
            prior_mean: self.prior_mean.as_slice(),
            sigma_g: rows(&self.sigma_g.sigma_g),
            residual_obs: self.residual_obs.as_slice(),
            residual_prior: self.residual_prior.as_slice(),
            timing: self.timing,
        }
        .serialize(s)
    }
}
