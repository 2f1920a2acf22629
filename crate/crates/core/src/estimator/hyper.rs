//! Estimation of the combination vector `g`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::marginal::MarginalProblem;
use crate::error::{Error, Result};
use crate::numerics::{self, AffineSubspace, Objective, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMethod {
    /// Quasi-Newton on the exact marginal likelihood.
    Nonlinear,
    /// Iterated convex subproblems with a trust-region safeguard.
    Sqp,
    /// A single convex step from the pseudoinverse start.
    OneIteration,
}

#[derive(Debug, Clone)]
pub struct HyperEstimate {
    pub g_hat: DVector<f64>,
    /// `J` at every accepted iterate, starting point first.
    pub objective_trace: Vec<f64>,
    pub method: HyperMethod,
    pub psi_at_g: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `J` restricted to the feasible set, in nullspace coordinates.
struct OnSubspace<'a> {
    prob: &'a MarginalProblem,
    sub: &'a AffineSubspace,
}

impl Objective for OnSubspace<'_> {
    fn value(&self, w: &DVector<f64>) -> f64 {
        self.prob.value(&self.sub.point(w))
    }

    fn gradient(&self, w: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.value_and_gradient(w).1)
    }

    fn value_and_gradient(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = self.prob.value_and_gradient(&self.sub.point(w));
        (v, self.sub.basis.tr_mul(&g))
    }
}

fn finish(prob: &MarginalProblem, g: DVector<f64>, trace: Vec<f64>, method: HyperMethod, converged: bool, iterations: usize) -> HyperEstimate {
    HyperEstimate { psi_at_g: prob.psi_full(&g), g_hat: g, objective_trace: trace, method, converged, iterations }
}

/// Minimum-norm least-squares solution of `ζ = ΦHg`.
pub fn pinv_init(task: &crate::tasks::TaskSpec, h: &crate::sigdata::SignalMatrix) -> Result<DVector<f64>> {
    if h.h.nrows() != task.dim() {
        return Err(Error::Dimension(format!(
            "signal matrix has {} rows, task needs {}",
            h.h.nrows(),
            task.dim()
        )));
    }
    let phi_h = task.observe_rows(&h.h);
    Ok(numerics::pinv(&phi_h, numerics::RANK_RTOL) * &task.zeta)
}

pub(crate) fn nonlinear(prob: &MarginalProblem, opts: &SolverOptions) -> Result<HyperEstimate> {
    opts.validate()?;
    let sub = prob.feasible();
    let to_w = |g: &DVector<f64>| sub.basis.tr_mul(&(g - &sub.particular));
    let pinv = prob.pinv();
    let mut starts = vec![to_w(pinv), to_w(&DVector::zeros(pinv.len()))];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..opts.multistart_count.max(3) - 2 {
        let pert = DVector::from_fn(pinv.len(), |i, _| {
            pinv[i] + 0.1 * (1.0 + pinv[i].abs()) * rng.random_range(-1.0..1.0)
        });
        starts.push(to_w(&pert));
    }
    let obj = OnSubspace { prob, sub };
    let res = numerics::minimize_multistart(&obj, &starts, opts).map_err(|e| match e {
        Error::NonFinite(_) => Error::Infeasible("the marginal likelihood is undefined at every start".into()),
        other => other,
    })?;
    let g = sub.point(&res.x);
    Ok(finish(prob, g, res.trace, HyperMethod::Nonlinear, res.converged, res.iterations))
}

/// Replaces eigenvalues of an indefinite `c` below `floor` by `floor`.
/// The subproblem then keeps the exact gradient through a linear term, so
/// its fixed points are stationary points of `J`.
fn clamp_psd(c: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    if c.nrows() == 0 || c.clone().cholesky().is_some() {
        return (c.clone(), false);
    }
    let eig = SymmetricEigen::new(numerics::symmetrize(c));
    if eig.eigenvalues.min() >= 0.0 {
        return (c.clone(), false);
    }
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (numerics::symmetrize(&out), true)
}

struct Subproblem {
    c: DMatrix<f64>,
    /// `2(C − C̃)g` after a clamp, so the model gradient at `g` stays exact.
    lin: Option<DVector<f64>>,
    psi_inv: DMatrix<f64>,
    omega: f64,
    clamped: bool,
}

fn subproblem(prob: &MarginalProblem, g: &DVector<f64>) -> Result<Subproblem> {
    let lm = prob
        .local_model(g)
        .ok_or_else(|| Error::NonFinite("Ψ is not positive definite at the current iterate".into()))?;
    let (c, clamped) = clamp_psd(&lm.c, 1e-10 * lm.logdet_diag.max(0.0));
    let lin = clamped.then(|| (&lm.c - &c) * g * 2.0);
    Ok(Subproblem { c, lin, psi_inv: lm.psi_inv, omega: lm.omega, clamped })
}

/// Convex step from `g`; with a radius, a Levenberg term `μ‖g' − g‖²` is
/// increased until the step fits.
fn convex_step(prob: &MarginalProblem, g: &DVector<f64>, sp: &Subproblem, radius: Option<f64>) -> DVector<f64> {
    let mut cand = prob.quadratic_step(&sp.c, sp.lin.as_ref(), &sp.psi_inv, sp.omega, 0.0, g);
    if let Some(radius) = radius {
        let mut mu = (sp.c.diagonal().abs().mean() * 1e-3).max(f64::MIN_POSITIVE.sqrt());
        for _ in 0..200 {
            if (&cand - g).norm() <= radius {
                break;
            }
            cand = prob.quadratic_step(&sp.c, sp.lin.as_ref(), &sp.psi_inv, sp.omega, mu, g);
            mu *= 4.0;
        }
    }
    cand
}

fn initial_radius(g0: &DVector<f64>, opts: &SolverOptions) -> f64 {
    if g0.norm() > 0.0 {
        g0.norm()
    } else {
        opts.trust_radius_init
    }
}

pub(crate) fn sqp(prob: &MarginalProblem, opts: &SolverOptions) -> Result<HyperEstimate> {
    opts.validate()?;
    let mut g = prob.project(prob.pinv());
    let mut j = prob.value(&g);
    if !j.is_finite() {
        return Err(Error::NonFinite("marginal likelihood undefined at the pseudoinverse start".into()));
    }
    let mut trace = vec![j];
    let mut radius = initial_radius(&g, opts);
    // the radius only binds after a clamp or a rejected step
    let mut guarded = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let sp = subproblem(prob, &g)?;
        guarded |= sp.clamped;
        let cand = convex_step(prob, &g, &sp, guarded.then_some(radius));
        let step = (&cand - &g).norm();
        let jn = prob.value(&cand);
        if jn.is_finite() && jn <= j {
            g = cand;
            j = jn;
            trace.push(j);
            if guarded {
                radius *= 2.0;
            }
            if step <= opts.step_tol * (1.0 + g.norm()) {
                converged = true;
                break;
            }
        } else {
            guarded = true;
            radius = 0.5 * radius.min(step);
            if radius <= opts.step_tol * (1.0 + g.norm()) {
                converged = true;
                break;
            }
        }
    }
    Ok(finish(prob, g, trace, HyperMethod::Sqp, converged, iterations))
}

pub(crate) fn one_iteration(prob: &MarginalProblem) -> Result<HyperEstimate> {
    let g0 = prob.project(prob.pinv());
    let j0 = prob.value(&g0);
    let sp = subproblem(prob, &g0)?;
    let g1 = convex_step(prob, &g0, &sp, sp.clamped.then(|| initial_radius(&g0, &SolverOptions::default())));
    let j1 = prob.value(&g1);
    Ok(finish(prob, g1, vec![j0, j1], HyperMethod::OneIteration, true, 1))
}
