//! MAP trajectory given `g`.

use nalgebra::{DMatrix, DVector};

use crate::covariance::PriorScale;
use crate::error::{Error, Result};
use crate::numerics::{self, PsdDecomposition, SolverOptions, WithGradient, RANK_RTOL};
use crate::sigdata::SignalMatrix;
use crate::tasks::TaskSpec;
use crate::uncertainty::EllipticalFamily;

fn check_shapes(task: &TaskSpec, h: &SignalMatrix, g: &DVector<f64>, sigma_g: &PriorScale) -> Result<()> {
    let d = task.dim();
    if h.h.nrows() != d || h.h.ncols() != g.len() || sigma_g.sigma_g.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "task dimension {d}, H {:?}, g {}, Σ_g {:?}",
            h.h.shape(),
            g.len(),
            sigma_g.sigma_g.shape()
        )));
    }
    Ok(())
}

/// Posterior mode of `z⁰` given `ζ` and the prior `E(Hg, Σ_g(g))`.
pub fn map_estimate(
    task: &TaskSpec,
    h: &SignalMatrix,
    g: &DVector<f64>,
    sigma_g: &PriorScale,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    check_shapes(task, h, g, sigma_g)?;
    match task.family {
        EllipticalFamily::Gaussian => match gaussian_map_pd(task, h, g, sigma_g) {
            Ok(z) => Ok(z),
            Err(Error::Singular(_)) => gaussian_map_singular(task, h, g, sigma_g),
            Err(e) => Err(e),
        },
        EllipticalFamily::StudentT { .. } => student_map(task, h, g, sigma_g, opts),
    }
}

/// `(ΦᵀΣ_ε⁻¹Φ + Σ_g⁻¹)⁻¹(ΦᵀΣ_ε⁻¹ζ + Σ_g⁻¹Hg)` for positive definite scales.
pub fn gaussian_map_pd(task: &TaskSpec, h: &SignalMatrix, g: &DVector<f64>, sigma_g: &PriorScale) -> Result<DVector<f64>> {
    check_shapes(task, h, g, sigma_g)?;
    let singular = |what: &str| {
        Error::Singular(format!("{what} is not positive definite; use gaussian_map_singular"))
    };
    let ce = task.sigma_eps.clone().cholesky().ok_or_else(|| singular("Σ_ε"))?;
    let cg = sigma_g.sigma_g.clone().cholesky().ok_or_else(|| singular("Σ_g"))?;
    let hg = &h.h * g;
    let w_phi = ce.solve(&task.phi);
    let f = task.phi.tr_mul(&w_phi) + cg.inverse();
    let rhs = w_phi.tr_mul(&task.zeta) + cg.solve(&hg);
    let cf = numerics::symmetrize(&f).cholesky().ok_or_else(|| singular("the posterior precision"))?;
    Ok(cf.solve(&rhs))
}

struct Split {
    /// `U₁Σ₁⁻¹U₁ᵀ`.
    prec: DMatrix<f64>,
    dec: PsdDecomposition,
}

fn split(s: &DMatrix<f64>) -> Result<Split> {
    let dec = numerics::decompose_psd_default(s)?;
    Ok(Split { prec: dec.range_inverse(), dec })
}

/// Hard constraints `V z = c` from the zero-variance directions.
fn hard_constraints(
    task: &TaskSpec,
    hg: &DVector<f64>,
    eps: &Split,
    prior: &Split,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = task.dim();
    let ue2 = &eps.dec.u2;
    let ug2 = &prior.dec.u2;
    let k1 = ue2.ncols();
    let k2 = ug2.ncols();
    let mut v = DMatrix::zeros(k1 + k2, d);
    let mut c = DVector::zeros(k1 + k2);
    v.rows_mut(0, k1).copy_from(&ue2.tr_mul(&task.phi));
    c.rows_mut(0, k1).copy_from(&ue2.tr_mul(&task.zeta));
    v.rows_mut(k1, k2).copy_from(&ug2.transpose());
    c.rows_mut(k1, k2).copy_from(&ug2.tr_mul(hg));
    numerics::reduce_constraints(&v, &c, d).map_err(|e| match e {
        Error::Infeasible(msg) => Error::Infeasible(format!(
            "zero-variance directions of the measurement and the prior disagree: {msg}"
        )),
        other => other,
    })
}

/// Closed form with zero-variance directions as equality constraints;
/// falls back to the joint KKT system when `F` is singular.
pub fn gaussian_map_singular(
    task: &TaskSpec,
    h: &SignalMatrix,
    g: &DVector<f64>,
    sigma_g: &PriorScale,
) -> Result<DVector<f64>> {
    check_shapes(task, h, g, sigma_g)?;
    let hg = &h.h * g;
    let eps = split(&task.sigma_eps)?;
    let prior = split(&sigma_g.sigma_g)?;
    let f = numerics::symmetrize(&(task.phi.tr_mul(&(&eps.prec * &task.phi)) + &prior.prec));
    let m = task.phi.tr_mul(&(&eps.prec * &task.zeta)) + &prior.prec * &hg;
    let (v, c) = hard_constraints(task, &hg, &eps, &prior)?;
    if prior.dec.rank == 0 {
        // a degenerate prior pins z = Hg
        return Ok(hg);
    }
    let feas_tol = 1e-8 * (1.0 + c.norm());

    if let Some(z) = closed_form(&f, &m, &v, &c) {
        if v.nrows() == 0 || (&v * &z - &c).norm() <= feas_tol {
            return Ok(z);
        }
    }
    let z = match numerics::solve_eq_qp(&f, &(-&m), &v, &c) {
        Ok(z) if v.nrows() == 0 || (&v * &z - &c).norm() <= feas_tol => z,
        Ok(_) | Err(Error::SingularKkt { .. }) => numerics::solve_eq_qp_nullspace(&f, &(-&m), &v, &c)?,
        Err(e) => return Err(e),
    };
    Ok(z)
}

/// `(F⁻¹ − F⁻¹Vᵀ(VF⁻¹Vᵀ)⁻¹VF⁻¹)m + F⁻¹Vᵀ(VF⁻¹Vᵀ)⁻¹c`, or `None` when `F`
/// or the Schur complement is numerically singular.
fn closed_form(f: &DMatrix<f64>, m: &DVector<f64>, v: &DMatrix<f64>, c: &DVector<f64>) -> Option<DVector<f64>> {
    let cf = well_conditioned_cholesky(f)?;
    let fm = cf.solve(m);
    if v.nrows() == 0 {
        return Some(fm);
    }
    let fv = cf.solve(&v.transpose());
    let schur = numerics::symmetrize(&(v * &fv));
    let cs = well_conditioned_cholesky(&schur)?;
    let lam = cs.solve(&(v * &fm - c));
    Some(fm - fv * lam)
}

fn well_conditioned_cholesky(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let ch = a.clone().cholesky()?;
    let d = ch.l_dirty().diagonal();
    let (lo, hi) = (d.min(), d.max());
    (lo > 0.0 && (lo / hi).powi(2) > 1e-13).then_some(ch)
}

/// Student's t posterior mode over the affine set of the hard constraints,
/// warm-started at the Gaussian mode.
fn student_map(
    task: &TaskSpec,
    h: &SignalMatrix,
    g: &DVector<f64>,
    sigma_g: &PriorScale,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let hg = &h.h * g;
    let eps = split(&task.sigma_eps)?;
    let prior = split(&sigma_g.sigma_g)?;
    let (v, c) = hard_constraints(task, &hg, &eps, &prior)?;
    let sub = numerics::affine_solutions(&v, &c, RANK_RTOL, 1e-8 * (1.0 + c.norm()))?;
    let z_gauss = gaussian_map_singular(task, h, g, sigma_g)?;
    if sub.free_dim() == 0 {
        return Ok(sub.particular);
    }
    let (re, rg) = (eps.dec.rank, prior.dec.rank);
    let family = task.family;
    let parts = |w: &DVector<f64>| {
        let z = sub.point(w);
        let de = &task.zeta - &task.phi * &z;
        let dg = &z - &hg;
        let pe = &eps.prec * &de;
        let pg = &prior.prec * &dg;
        (de.dot(&pe), dg.dot(&pg), pe, pg)
    };
    let value = |w: &DVector<f64>| {
        let (xe, xg, _, _) = parts(w);
        -family.log_radial(xe, re) - family.log_radial(xg, rg)
    };
    let gradient = |w: &DVector<f64>| {
        let (xe, xg, pe, pg) = parts(w);
        let we = -family.log_radial_slope(xe, re);
        let wg = -family.log_radial_slope(xg, rg);
        let gz = task.phi.tr_mul(&pe) * (-2.0 * we) + pg * (2.0 * wg);
        sub.basis.tr_mul(&gz)
    };
    let w0 = sub.basis.tr_mul(&(&z_gauss - &sub.particular));
    let res = numerics::minimize_smooth(&WithGradient(value, gradient), &w0, opts)?;
    Ok(sub.point(&res.x))
}
