//! Regularized data-driven predictor and DeePC problems.
//!
//! Under Gaussian, white noise with exact inputs these coincide with the
//! first convex step of the marginal-likelihood SQP; they also serve as
//! comparison methods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics;
use crate::sigdata::SignalMatrix;
use crate::tasks::{RowTag, TaskKind, TaskSpec};

/// Row blocks of `H` and the matching parts of `ζ`, all stacked time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedData {
    pub h_up: DMatrix<f64>,
    pub h_yp: DMatrix<f64>,
    pub h_uf: DMatrix<f64>,
    pub h_yf: DMatrix<f64>,
    pub u_p: DVector<f64>,
    pub y_p: DVector<f64>,
    /// Known future inputs (prediction) or the input reference (control).
    pub u_ref: DVector<f64>,
    /// Output reference; empty for prediction.
    pub y_ref: DVector<f64>,
    pub n_u: usize,
    pub n_y: usize,
    pub l0: usize,
}

impl PartitionedData {
    /// Splits `H` and `ζ` along the layout of a prediction or control task.
    pub fn new(task: &TaskSpec, h: &SignalMatrix) -> Result<Self> {
        if task.kind == TaskKind::Smoothing {
            return Err(Error::InvalidArgument("smoothing tasks have no past/future split".into()));
        }
        if h.h.nrows() != task.dim() {
            return Err(Error::Dimension(format!(
                "signal matrix has {} rows, task needs {}",
                h.h.nrows(),
                task.dim()
            )));
        }
        let mut pos = vec![None; task.dim()];
        for (k, (&i, &tag)) in task.rows.iter().zip(&task.tags).enumerate() {
            pos[i] = Some((k, tag));
        }
        let (l0, l) = (task.l0, task.l);
        let block = |idx: &[usize]| DMatrix::from_fn(idx.len(), h.m(), |a, j| h.h[(idx[a], j)]);
        let values = |idx: &[usize], want: &[RowTag]| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(idx.len());
            for (a, &i) in idx.iter().enumerate() {
                match pos[i] {
                    Some((k, tag)) if want.contains(&tag) => v[a] = task.zeta[k],
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "entry {i} of the trajectory is not observed as {want:?}"
                        )))
                    }
                }
            }
            Ok(v)
        };
        let up = task.indices(true, 0, l0);
        let yp = task.indices(false, 0, l0);
        let uf = task.indices(true, l0, l);
        let yf = task.indices(false, l0, l);
        let future_tags = [RowTag::KnownInput, RowTag::Design];
        let y_ref = if task.kind == TaskKind::Control {
            values(&yf, &[RowTag::Design])?
        } else {
            DVector::zeros(0)
        };
        Ok(Self {
            h_up: block(&up),
            h_yp: block(&yp),
            h_uf: block(&uf),
            h_yf: block(&yf),
            u_p: values(&up, &[RowTag::Measured])?,
            y_p: values(&yp, &[RowTag::Measured])?,
            u_ref: values(&uf, &future_tags)?,
            y_ref,
            n_u: task.n_u,
            n_y: task.n_y,
            l0,
        })
    }

    pub fn m(&self) -> usize {
        self.h_up.ncols()
    }

    /// `L′`.
    pub fn horizon(&self) -> usize {
        if self.n_u > 0 {
            self.h_uf.nrows() / self.n_u
        } else {
            self.h_yf.nrows() / self.n_y.max(1)
        }
    }

    /// `H_u = col(H_up, H_uf)` and `u = col(u_p, u_ref)`.
    fn input_constraint(&self) -> (DMatrix<f64>, DVector<f64>) {
        stack(&[(&self.h_up, &self.u_p), (&self.h_uf, &self.u_ref)])
    }
}

fn stack(parts: &[(&DMatrix<f64>, &DVector<f64>)]) -> (DMatrix<f64>, DVector<f64>) {
    let rows: usize = parts.iter().map(|(a, _)| a.nrows()).sum();
    let m = parts.first().map_or(0, |(a, _)| a.ncols());
    let mut a = DMatrix::zeros(rows, m);
    let mut b = DVector::zeros(rows);
    let mut r = 0;
    for (pa, pb) in parts {
        a.rows_mut(r, pa.nrows()).copy_from(pa);
        b.rows_mut(r, pb.len()).copy_from(pb);
        r += pa.nrows();
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSolution {
    pub g: DVector<f64>,
    pub y_future: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepcSolution {
    pub g: DVector<f64>,
    pub u_plan: DVector<f64>,
    pub y_plan: DVector<f64>,
}

impl DeepcSolution {
    fn from_g(data: &PartitionedData, g: DVector<f64>) -> Self {
        Self { u_plan: &data.h_uf * &g, y_plan: &data.h_yf * &g, g }
    }
}

/// Default predictor regularization `n_y L₀ σ_d²`.
pub fn predictor_lambda(data: &PartitionedData, sigma_d_sq: f64) -> f64 {
    (data.n_y * data.l0) as f64 * sigma_d_sq
}

/// Sum of weighted least-squares terms `Σ w‖b − A g‖² + λ‖g‖²` as `(P, q)`
/// of `½gᵀPg + qᵀg`.
fn normal_equations(terms: &[(f64, &DMatrix<f64>, &DVector<f64>)], lambda: f64, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut p = DMatrix::identity(m, m) * (2.0 * lambda);
    let mut q = DVector::zeros(m);
    for &(w, a, b) in terms {
        if w == 0.0 || a.nrows() == 0 {
            continue;
        }
        p += a.tr_mul(a) * (2.0 * w);
        q -= a.tr_mul(b) * (2.0 * w);
    }
    (numerics::symmetrize(&p), q)
}

/// `argmin λ‖g‖² + ‖y_p − H_yp g‖²` subject to `u = H_u g`. Among several
/// minimizers (`λ = 0` with rank-deficient data) the minimum-norm one is
/// returned.
pub fn predictor_regularized(data: &PartitionedData, lambda: f64) -> Result<PredictorSolution> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be non-negative, got {lambda}")));
    }
    let (p, q) = normal_equations(&[(1.0, &data.h_yp, &data.y_p)], lambda, data.m());
    let (a, b) = data.input_constraint();
    let g = numerics::solve_eq_qp_nullspace(&p, &q, &a, &b)?;
    Ok(PredictorSolution { y_future: &data.h_yf * &g, g })
}

/// Weights `(λ₁, λ₂, λ₃)` of the regularized DeePC problem; `λ₂` is
/// infinite when `σ² = σ_d² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepcWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

pub fn deepc_weights(
    data: &PartitionedData,
    q: f64,
    sigma_sq: f64,
    sigma_d_sq: f64,
    g0_norm_sq: f64,
) -> DeepcWeights {
    let s = sigma_d_sq * g0_norm_sq;
    let lambda1 = 1.0 / (s + 1.0 / q);
    let lambda2 = 1.0 / (s + sigma_sq);
    let lambda3 = if sigma_d_sq == 0.0 {
        0.0
    } else {
        data.n_y as f64 * sigma_d_sq * (data.horizon() as f64 * lambda1 + data.l0 as f64 * lambda2)
    };
    DeepcWeights { lambda1, lambda2, lambda3 }
}

/// `min r‖u_ref − H_uf g‖² + λ₁‖y_ref − H_yf g‖² + λ₂‖y_p − H_yp g‖² + λ₃‖g‖²`
/// subject to `u_p = H_up g`. `sigma_sq` and `sigma_d_sq` are the online and
/// offline output noise variances.
pub fn deepc_regularized(
    data: &PartitionedData,
    q: f64,
    r: f64,
    sigma_sq: f64,
    sigma_d_sq: f64,
    g0_norm_sq: f64,
) -> Result<DeepcSolution> {
    check_weights(q, r)?;
    if !(sigma_sq >= 0.0 && sigma_d_sq >= 0.0 && g0_norm_sq >= 0.0) {
        return Err(Error::InvalidArgument("noise variances and ‖g₀‖² must be non-negative".into()));
    }
    let w = deepc_weights(data, q, sigma_sq, sigma_d_sq, g0_norm_sq);
    if w.lambda2.is_infinite() {
        return deepc_unregularized(data, q, r);
    }
    let (p, qv) = normal_equations(
        &[
            (r, &data.h_uf, &data.u_ref),
            (w.lambda1, &data.h_yf, &data.y_ref),
            (w.lambda2, &data.h_yp, &data.y_p),
        ],
        w.lambda3,
        data.m(),
    );
    let g = numerics::solve_eq_qp_nullspace(&p, &qv, &data.h_up, &data.u_p)?;
    Ok(DeepcSolution::from_g(data, g))
}

fn check_weights(q: f64, r: f64) -> Result<()> {
    if !(q > 0.0 && r > 0.0) {
        return Err(Error::InvalidArgument(format!("weights must be positive, got q = {q}, r = {r}")));
    }
    Ok(())
}

/// `min r‖u_ref − H_uf g‖² + q‖y_ref − H_yf g‖²` subject to
/// `u_p = H_up g`, `y_p = H_yp g`.
pub fn deepc_unregularized(data: &PartitionedData, q: f64, r: f64) -> Result<DeepcSolution> {
    check_weights(q, r)?;
    let (p, qv) = normal_equations(&[(r, &data.h_uf, &data.u_ref), (q, &data.h_yf, &data.y_ref)], 0.0, data.m());
    let (a, b) = stack(&[(&data.h_up, &data.u_p), (&data.h_yp, &data.y_p)]);
    let g = numerics::solve_eq_qp_nullspace(&p, &qv, &a, &b)?;
    Ok(DeepcSolution::from_g(data, g))
}

/// [`deepc_unregularized`] with the `y_p` constraint replaced by the penalty
/// `weight·‖y_p − H_yp g‖²`.
pub fn deepc_unregularized_soft(data: &PartitionedData, q: f64, r: f64, weight: f64) -> Result<DeepcSolution> {
    check_weights(q, r)?;
    if !(weight > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty weight must be positive, got {weight}")));
    }
    let (p, qv) = normal_equations(
        &[(r, &data.h_uf, &data.u_ref), (q, &data.h_yf, &data.y_ref), (weight, &data.h_yp, &data.y_p)],
        0.0,
        data.m(),
    );
    let g = numerics::solve_eq_qp_nullspace(&p, &qv, &data.h_up, &data.u_p)?;
    Ok(DeepcSolution::from_g(data, g))
}
