//! Per-trial data generation, method execution and metrics.

use std::time::Instant;

use ddk_core::baselines::{
    deepc_regularized, deepc_unregularized_soft, predictor_lambda, predictor_regularized, PartitionedData,
};
use ddk_core::estimator::{pinv_init, run_algorithm1, HyperMethod};
use ddk_core::lti::{make_diffusion_system, random_system, LtiSystem};
use ddk_core::sigdata::{build_signal_matrix, check_identifiability, SignalMatrix, Trajectory, DATA_RANK_RTOL};
use ddk_core::tasks::{
    build_control, build_prediction, build_smoothing, control_cost, ControlObjective, TaskKind, TaskSpec,
};
use ddk_core::uncertainty::{sample_stationary_process, NoiseModel};
use ddk_core::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, SystemSource, TaskKindConfig};
use crate::error::{BenchError, Result};

/// Draws per trial before the trial is recorded as failed.
pub const MAX_ATTEMPTS: usize = 10;

/// Seed of draw `attempt` of trial `trial`: the `attempt`-th word of the
/// trial's own ChaCha stream under the base seed.
pub fn trial_seed(base: u64, trial: usize, attempt: usize) -> u64 {
    let mut r = ChaCha20Rng::seed_from_u64(base);
    r.set_stream(trial as u64);
    let mut s = r.next_u64();
    for _ in 0..attempt {
        s = r.next_u64();
    }
    s
}

/// Everything one trial needs: the realization shared by all methods.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub system: LtiSystem,
    pub h: SignalMatrix,
    pub task: TaskSpec,
    /// Noise-free online window of length `L`.
    pub truth: Trajectory,
    /// True state at the start of the future window (control only).
    pub x_future: DVector<f64>,
    pub objective: Option<ControlObjective>,
    pub offline: NoiseModel,
}

fn white_inputs(rng: &mut ChaCha20Rng, n_u: usize, len: usize) -> Vec<DVector<f64>> {
    (0..len).map(|_| DVector::from_fn(n_u, |_, _| StandardNormal.sample(rng))).collect()
}

fn add_noise(t: &Trajectory, noise: &[DVector<f64>]) -> Result<Trajectory> {
    let n_u = t.n_u();
    let u = t.u.iter().zip(noise).map(|(u, e)| u + e.rows(0, n_u)).collect();
    let y = t.y.iter().zip(noise).map(|(y, e)| y + e.rows(n_u, t.n_y())).collect();
    Ok(Trajectory::new(u, y)?)
}

/// Noise-free run of white-noise inputs after a burn-in from rest; returns
/// the trajectory and the states `x_1..x_{len+1}` aligned with it.
fn excited_run(
    sys: &LtiSystem,
    rng: &mut ChaCha20Rng,
    len: usize,
) -> Result<(Trajectory, Vec<DVector<f64>>)> {
    let burn = 5 * sys.n_x();
    let u = white_inputs(rng, sys.n_u(), burn + len);
    let (y, x) = sys.simulate_states(&u, &DVector::zeros(sys.n_x()))?;
    let traj = Trajectory::new(u[burn..].to_vec(), y[burn..].to_vec())?;
    Ok((traj, x[burn..].to_vec()))
}

pub fn fixed_system(cfg: &ExperimentConfig) -> Result<Option<LtiSystem>> {
    match &cfg.system {
        SystemSource::Random { .. } => Ok(None),
        SystemSource::Diffusion { alpha, beta } => Ok(Some(make_diffusion_system(*alpha, *beta)?)),
        SystemSource::File { path } => {
            let text = std::fs::read_to_string(path)?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

/// One realization of system, offline data and online window.
pub fn generate(cfg: &ExperimentConfig, fixed: Option<&LtiSystem>, rng: &mut ChaCha20Rng) -> Result<TrialData> {
    let system = match (fixed, &cfg.system) {
        (Some(s), _) => s.clone(),
        (None, SystemSource::Random { n_x, n_u, n_y }) => random_system(*n_x, *n_u, *n_y, rng)?,
        (None, _) => return Err(BenchError::Config("system source needs a fixed plant".into())),
    };
    let (n_u, n_y) = (system.n_u(), system.n_y());
    let offline = cfg.offline_noise.model(n_u, n_y)?;
    let online = cfg.online_noise.model(n_u, n_y)?;
    let (l, l0) = (cfg.task.l, cfg.task.l0);

    let (clean, _) = excited_run(&system, rng, cfg.n_data)?;
    let noise = sample_stationary_process(&offline, cfg.n_data, rng)?;
    let h = build_signal_matrix(&add_noise(&clean, &noise)?, l, cfg.construction)?;

    let (truth, states) = excited_run(&system, rng, l)?;
    let noise = sample_stationary_process(&online, l, rng)?;
    let meas = add_noise(&truth, &noise)?;
    let lag = if cfg.task.kind == TaskKindConfig::Smoothing { 0 } else { system.lag()? };
    let mut objective = None;
    let task = match cfg.task.kind {
        TaskKindConfig::Smoothing => build_smoothing(&meas, &online)?,
        TaskKindConfig::Prediction => build_prediction(&meas.slice(0, l0)?, &meas.u[l0..], &online, lag)?,
        TaskKindConfig::Control => {
            let c = cfg.task.control.as_ref().ok_or_else(|| BenchError::Config("missing control block".into()))?;
            let obj = ControlObjective::scalar(c.q, c.r, c.u_reference(&system)?, c.y_reference())?;
            let task = build_control(&meas.slice(0, l0)?, &obj, &online, lag)?;
            objective = Some(obj);
            task
        }
    };
    if cfg.require_identifiable {
        let h0 = build_signal_matrix(&clean, l, cfg.construction)?;
        let rep = check_identifiability(&h0, &task.phi, system.n_x(), DATA_RANK_RTOL)?;
        if !rep.satisfied {
            return Err(BenchError::Config(format!(
                "rank condition fails: rank H0 = {}, rank ΦH0 = {}, need {}",
                rep.rank_h0, rep.rank_phi_h0, rep.required
            )));
        }
    }
    let x_future = states[if task.kind == TaskKind::Control { l0 } else { 0 }].clone();
    Ok(TrialData { system, h, task, truth, x_future, objective, offline })
}

/// Root mean square of `a − b`.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len().max(1) as f64).sqrt()
}

fn output_rmse(task: &TaskSpec, z_hat: &DVector<f64>, truth: &Trajectory, t0: usize) -> f64 {
    let idx = task.indices(false, t0, task.l);
    let z0 = truth.stacked();
    let a: Vec<f64> = idx.iter().map(|&i| z_hat[i]).collect();
    let b: Vec<f64> = idx.iter().map(|&i| z0[i]).collect();
    rmse(&a, &b)
}

/// Trajectory of the true plant under the planned inputs, appended to the
/// true past window.
pub fn realized_trajectory(data: &TrialData, u_plan: &[DVector<f64>]) -> Result<DVector<f64>> {
    let y = data.system.simulate(u_plan, &data.x_future)?;
    let l0 = data.task.l0;
    let mut u = data.truth.u[..l0].to_vec();
    let mut ys = data.truth.y[..l0].to_vec();
    u.extend_from_slice(u_plan);
    ys.extend(y);
    Ok(Trajectory::new(u, ys)?.stacked())
}

fn realized_cost(data: &TrialData, u_plan: &[DVector<f64>]) -> Result<f64> {
    let obj = data.objective.as_ref().ok_or_else(|| BenchError::Config("missing control objective".into()))?;
    Ok(control_cost(&realized_trajectory(data, u_plan)?, obj, data.task.l0)?)
}

fn split(v: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(n).map(DVector::from_column_slice).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub metric: f64,
    pub converged: bool,
    /// Full trajectory estimate (Bayes methods only).
    pub z_hat: Option<DVector<f64>>,
}

/// Runs one method on one realization and scores it.
pub fn run_method(cfg: &ExperimentConfig, data: &TrialData, method: Method) -> Result<Outcome> {
    let task = &data.task;
    let hyper = match method {
        Method::Nonlinear => Some(HyperMethod::Nonlinear),
        Method::Sqp => Some(HyperMethod::Sqp),
        Method::Approx => Some(HyperMethod::OneIteration),
        _ => None,
    };
    if let Some(hm) = hyper {
        let rep = run_algorithm1(task, &data.h, &data.offline, hm, &cfg.solver.options())?;
        let metric = match task.kind {
            TaskKind::Smoothing => output_rmse(task, &rep.z_hat, &data.truth, 0),
            TaskKind::Prediction => output_rmse(task, &rep.z_hat, &data.truth, task.l0),
            TaskKind::Control => realized_cost(data, &task.future_inputs(&rep.z_hat))?,
        };
        return Ok(Outcome { metric, converged: rep.g.converged, z_hat: Some(rep.z_hat) });
    }
    let pd = PartitionedData::new(task, &data.h)?;
    let sd2 = cfg.offline_noise.sigma_v;
    let metric = match method {
        Method::Predictor => {
            let lambda = cfg.predictor_lambda.unwrap_or_else(|| predictor_lambda(&pd, sd2));
            let sol = predictor_regularized(&pd, lambda)?;
            let z0 = data.truth.stacked();
            let truth: Vec<f64> = task.indices(false, task.l0, task.l).iter().map(|&i| z0[i]).collect();
            rmse(sol.y_future.as_slice(), &truth)
        }
        Method::Deepc | Method::DeepcUnreg => {
            let c = cfg.task.control.as_ref().ok_or_else(|| BenchError::Config("missing control block".into()))?;
            let sol = if method == Method::Deepc {
                let g0 = pinv_init(task, &data.h)?;
                deepc_regularized(&pd, c.q, c.r, cfg.online_noise.sigma_v, sd2, g0.norm_squared())?
            } else {
                deepc_unregularized_soft(&pd, c.q, c.r, cfg.deepc_unreg_weight.unwrap_or(1e6 * c.q))?
            };
            realized_cost(data, &split(&sol.u_plan, task.n_u))?
        }
        _ => unreachable!("Bayes methods handled above"),
    };
    Ok(Outcome { metric, converged: true, z_hat: None })
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    /// `None` when the method failed.
    pub metric: Option<f64>,
    pub wall_ms: f64,
    pub converged: bool,
    pub error: Option<String>,
}

/// Generates trial `trial`, redrawing on generation failures.
pub fn generate_trial(cfg: &ExperimentConfig, fixed: Option<&LtiSystem>, trial: usize) -> Result<(u64, TrialData)> {
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = trial_seed(cfg.seed, trial, attempt);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        match generate(cfg, fixed, &mut rng) {
            Ok(d) => return Ok((seed, d)),
            Err(e) => {
                log::debug!("trial {trial} draw {attempt} rejected: {e}");
                last = e.to_string();
            }
        }
    }
    Err(BenchError::Generation { trial, attempts: MAX_ATTEMPTS, last })
}

pub fn run_trial(cfg: &ExperimentConfig, fixed: Option<&LtiSystem>, trial: usize) -> Vec<TrialRecord> {
    let (seed, data) = match generate_trial(cfg, fixed, trial) {
        Ok(x) => x,
        Err(e) => {
            log::warn!("{e}");
            return cfg
                .methods
                .iter()
                .map(|&method| TrialRecord {
                    trial,
                    seed: trial_seed(cfg.seed, trial, 0),
                    method,
                    metric: None,
                    wall_ms: 0.0,
                    converged: false,
                    error: Some(e.to_string()),
                })
                .collect();
        }
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let res = run_method(cfg, &data, method);
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            match res {
                Ok(o) if o.metric.is_finite() => TrialRecord {
                    trial,
                    seed,
                    method,
                    metric: Some(o.metric),
                    wall_ms,
                    converged: o.converged,
                    error: None,
                },
                Ok(o) => TrialRecord {
                    trial,
                    seed,
                    method,
                    metric: None,
                    wall_ms,
                    converged: false,
                    error: Some(format!("non-finite metric {}", o.metric)),
                },
                Err(e) => {
                    log::warn!("trial {trial} {method}: {e}");
                    TrialRecord { trial, seed, method, metric: None, wall_ms, converged: false, error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}

/// Runs all trials on `workers` threads; records come back ordered by trial,
/// then by the configured method order.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let fixed = fixed_system(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchError::Config(format!("cannot start worker pool: {e}")))?;
    let per_trial: Vec<Vec<TrialRecord>> =
        pool.install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, fixed.as_ref(), t)).collect());
    Ok(per_trial.into_iter().flatten().collect())
}
