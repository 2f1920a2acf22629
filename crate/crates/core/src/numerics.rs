//! Dense numeric kernels shared by the estimators.
//!
//! Everything here works on small dense `nalgebra` matrices (a few hundred
//! rows at most): rank-revealing PSD splits, equality-constrained quadratic
//! programs, a BFGS minimizer, discrete Lyapunov solves and a
//! finite-difference gradient checker.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Relative singular-value cutoff used for numerical rank, pseudoinverses and
/// nullspaces.
pub const RANK_RTOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-10;

/// Split of a PSD matrix `Σ = [U1 U2] blkdiag(Σ1, 0) [U1 U2]ᵀ`.
///
/// `sigma1` is diagonal (the retained eigenvalues in descending order), so
/// quadratic forms in `Σ1⁻¹` are elementwise divisions.
#[derive(Debug, Clone)]
pub struct PsdDecomposition {
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub rank: usize,
    pub tol: f64,
    eigenvalues: DVector<f64>,
}

impl PsdDecomposition {
    pub fn dim(&self) -> usize {
        self.u1.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dim()
    }

    /// Retained eigenvalues (diagonal of `sigma1`).
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.ln()).sum()
    }

    /// `‖U1ᵀ v‖²` weighted by `Σ1⁻¹`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        let w = self.u1.tr_mul(v);
        w.iter()
            .zip(self.eigenvalues.iter())
            .map(|(wi, li)| wi * wi / li)
            .sum()
    }

    /// `U1 Σ1⁻¹ U1ᵀ`, the pseudoinverse of the decomposed matrix.
    pub fn range_inverse(&self) -> DMatrix<f64> {
        let mut scaled = self.u1.clone();
        for (j, l) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / l);
        }
        scaled * self.u1.transpose()
    }

    /// `U1 Σ1^{1/2}`, a square-root factor of the decomposed matrix.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let mut f = self.u1.clone();
        for (j, l) in self.eigenvalues.iter().enumerate() {
            f.column_mut(j).scale_mut(l.sqrt());
        }
        f
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.sqrt_factor() * self.sqrt_factor().transpose()
    }
}

/// Largest absolute asymmetry `max |a_ij − a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL * max_abs(a).max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Default rank cutoff `m·ε·λ_max` for a symmetric matrix.
pub fn default_rank_tol(sigma: &DMatrix<f64>) -> f64 {
    let m = sigma.nrows().max(1) as f64;
    let lmax = if sigma.is_empty() {
        0.0
    } else {
        SymmetricEigen::new(symmetrize(sigma))
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    };
    (m * f64::EPSILON * lmax).max(f64::MIN_POSITIVE)
}

/// Eigendecomposition split of a PSD matrix at the absolute cutoff `tol`.
///
/// Eigenvalues `≤ tol` are treated as zero; any eigenvalue below `−10·tol`
/// is rejected as indefinite.
pub fn decompose_psd(sigma: &DMatrix<f64>, tol: f64) -> Result<PsdDecomposition> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    check_symmetric(sigma)?;
    let m = sigma.nrows();
    if m == 0 {
        return Ok(PsdDecomposition {
            u1: DMatrix::zeros(0, 0),
            u2: DMatrix::zeros(0, 0),
            sigma1: DMatrix::zeros(0, 0),
            rank: 0,
            tol,
            eigenvalues: DVector::zeros(0),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let min_eig = eig.eigenvalues.min();
    if min_eig < -10.0 * tol {
        return Err(Error::NotPsd { min_eigenvalue: min_eig });
    }
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    let mut u1 = DMatrix::zeros(m, rank);
    let mut u2 = DMatrix::zeros(m, m - rank);
    let mut vals = DVector::zeros(rank);
    for (k, &i) in order.iter().enumerate() {
        if k < rank {
            u1.set_column(k, &eig.eigenvectors.column(i));
            vals[k] = eig.eigenvalues[i];
        } else {
            u2.set_column(k - rank, &eig.eigenvectors.column(i));
        }
    }
    Ok(PsdDecomposition {
        u1,
        u2,
        sigma1: DMatrix::from_diagonal(&vals),
        rank,
        tol,
        eigenvalues: vals,
    })
}

/// [`decompose_psd`] with the default `m·ε·λ_max` cutoff.
pub fn decompose_psd_default(sigma: &DMatrix<f64>) -> Result<PsdDecomposition> {
    decompose_psd(sigma, default_rank_tol(sigma))
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` sorted in decreasing order and
/// `p = min(k, m)` columns in `U` and `V`.
struct ThinSvd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    v: DMatrix<f64>,
}

/// Orthonormal basis of the complement of the orthonormal columns of `q`
/// in `R^n`, `want` columns wide.
fn complement(q: &DMatrix<f64>, n: usize, want: usize) -> DMatrix<f64> {
    let proj = DMatrix::<f64>::identity(n, n) - q * q.transpose();
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    DMatrix::from_fn(n, want, |r, c| eig.eigenvectors[(r, order[c])])
}

/// SVD from the symmetric eigenproblem of `[[0, A], [Aᵀ, 0]]`, whose
/// eigenpairs are `(±σ, (u; ±v)/√2)`.
fn svd_via_eigen(a: &DMatrix<f64>) -> ThinSvd {
    let (k, m) = a.shape();
    let p = k.min(m);
    let mut jw = DMatrix::zeros(k + m, k + m);
    jw.view_mut((0, k), (k, m)).copy_from(a);
    jw.view_mut((k, 0), (m, k)).copy_from(&a.transpose());
    let eig = SymmetricEigen::new(jw);
    let mut order: Vec<usize> = (0..k + m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let found = order
        .iter()
        .take(p)
        .take_while(|&&i| eig.eigenvalues[i] > 64.0 * f64::EPSILON * top && top > 0.0)
        .count();
    let mut u = DMatrix::zeros(k, p);
    let mut v = DMatrix::zeros(m, p);
    let mut s = vec![0.0; p];
    for (c, &i) in order.iter().take(found).enumerate() {
        let x = eig.eigenvectors.column(i);
        u.set_column(c, &x.rows(0, k).normalize());
        v.set_column(c, &x.rows(k, m).normalize());
        s[c] = eig.eigenvalues[i];
    }
    if found < p {
        let cu = complement(&u.columns(0, found).into_owned(), k, p - found);
        let cv = complement(&v.columns(0, found).into_owned(), m, p - found);
        u.columns_mut(found, p - found).copy_from(&cu);
        v.columns_mut(found, p - found).copy_from(&cv);
    }
    ThinSvd { u, s, v }
}

/// Thin SVD with a reconstruction check; the LAPACK-free bidiagonal
/// iteration occasionally returns inaccurate factors on rank-deficient
/// inputs, in which case the eigenvalue route is used.
fn thin_svd(a: &DMatrix<f64>) -> ThinSvd {
    let (k, m) = a.shape();
    let p = k.min(m);
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let out = ThinSvd {
        u: DMatrix::from_fn(k, p, |r, c| u[(r, order[c])]),
        s: order.iter().map(|&i| svd.singular_values[i]).collect(),
        v: DMatrix::from_fn(m, p, |r, c| vt[(order[c], r)]),
    };
    let scale = max_abs(a);
    let rec = &out.u * DMatrix::from_diagonal(&DVector::from_column_slice(&out.s)) * out.v.transpose();
    if scale == 0.0 || max_abs(&(rec - a)) <= 1e-11 * scale * (p as f64).sqrt().max(1.0) {
        return out;
    }
    log::debug!("SVD of a {k}x{m} matrix failed its reconstruction check; using the eigenvalue route");
    svd_via_eigen(a)
}

/// Full SVD: `u` is `k×m` (columns beyond `min(k, m)` are zero) and `v` is a
/// complete `m×m` orthonormal basis.
struct FullSvd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    v: DMatrix<f64>,
}

fn full_svd(a: &DMatrix<f64>) -> FullSvd {
    let (k, m) = a.shape();
    let p = k.min(m);
    let t = thin_svd(a);
    let mut u = DMatrix::zeros(k, m);
    u.columns_mut(0, p).copy_from(&t.u);
    let mut v = DMatrix::zeros(m, m);
    v.columns_mut(0, p).copy_from(&t.v);
    if p < m {
        v.columns_mut(p, m - p).copy_from(&complement(&t.v, m, m - p));
    }
    let mut s = t.s;
    s.resize(m, 0.0);
    FullSvd { u, s, v }
}

fn cutoff(s: &[f64], rtol: f64) -> f64 {
    rtol * s.first().copied().unwrap_or(0.0)
}

/// Numerical rank with singular values above `rtol·σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let s = thin_svd(a).s;
    let smax = s[0];
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Moore–Penrose pseudoinverse with relative cutoff.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (k, m) = a.shape();
    if a.is_empty() {
        return DMatrix::zeros(m, k);
    }
    let t = thin_svd(a);
    let smax = t.s[0];
    let mut out = DMatrix::zeros(m, k);
    for (i, &s) in t.s.iter().enumerate() {
        if smax > 0.0 && s > rtol * smax {
            out += (t.v.column(i) * t.u.column(i).transpose()) / s;
        }
    }
    out
}

/// Affine parameterization `{x : a x = b} = {x_p + N w}` with `x_p` the
/// minimum-norm solution and `N` an orthonormal nullspace basis.
#[derive(Debug, Clone)]
pub struct AffineSubspace {
    pub particular: DVector<f64>,
    pub basis: DMatrix<f64>,
    /// Rank of the constraint matrix after dropping redundant rows.
    pub rank: usize,
    /// `‖a x_p − b‖`; nonzero only up to rounding when consistent.
    pub residual: f64,
}

impl AffineSubspace {
    pub fn point(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.basis * w
    }

    pub fn free_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// The whole space `R^m` (no constraints).
    pub fn unconstrained(m: usize) -> Self {
        Self {
            particular: DVector::zeros(m),
            basis: DMatrix::identity(m, m),
            rank: 0,
            residual: 0.0,
        }
    }
}

/// Solutions of `a x = b`, with redundant rows dropped. Inconsistent systems
/// (residual above `feas_tol`) are rejected.
pub fn affine_solutions(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rtol: f64,
    feas_tol: f64,
) -> Result<AffineSubspace> {
    let (k, m) = a.shape();
    if b.len() != k {
        return Err(Error::Dimension(format!(
            "constraint matrix has {k} rows but rhs has {}",
            b.len()
        )));
    }
    if k == 0 {
        return Ok(AffineSubspace::unconstrained(m));
    }
    let svd = full_svd(a);
    let cut = cutoff(&svd.s, rtol);
    let rank = svd.s.iter().take(k.min(m)).filter(|&&s| s > cut && s > 0.0).count();
    let mut particular = DVector::zeros(m);
    for i in 0..rank {
        let coef = svd.u.column(i).dot(b) / svd.s[i];
        particular += svd.v.column(i) * coef;
    }
    let residual = (a * &particular - b).norm();
    if residual > feas_tol {
        return Err(Error::Infeasible(format!(
            "equality constraints inconsistent (residual {residual:.3e} > {feas_tol:.3e})"
        )));
    }
    let basis = svd.v.columns(rank, m - rank).into_owned();
    Ok(AffineSubspace { particular, basis, rank, residual })
}

/// Minimum-norm solution of the symmetric PSD system `p x = r` using an
/// eigen pseudoinverse when `p` is (nearly) singular.
pub fn solve_psd_min_norm(p: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let n = p.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    if let Some(ch) = p.clone().cholesky() {
        let l = ch.l_dirty();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = l[(i, i)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if dmax > 0.0 && (dmin / dmax).powi(2) > 1e-10 {
            return ch.solve(r);
        }
    }
    let eig = SymmetricEigen::new(symmetrize(p));
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut x = DVector::zeros(n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if lmax > 0.0 && l > 1e-12 * lmax {
            let v = eig.eigenvectors.column(i);
            x += v * (v.dot(r) / l);
        }
    }
    x
}

/// Equality-constrained QP `min ½xᵀpx + qᵀx s.t. a x = b` by KKT solve.
///
/// Redundant constraint rows are dropped first (consistency is checked).
pub fn solve_eq_qp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = p.nrows();
    if !p.is_square() || q.len() != m || (a.nrows() > 0 && a.ncols() != m) || a.nrows() != b.len()
    {
        return Err(Error::Dimension(format!(
            "eq-QP shapes p {:?}, q {}, a {:?}, b {}",
            p.shape(),
            q.len(),
            a.shape(),
            b.len()
        )));
    }
    let (a, b) = reduce_constraints(a, b, m)?;
    let k = a.nrows();
    let n = m + k;
    let mut kkt = DMatrix::zeros(n, n);
    kkt.view_mut((0, 0), (m, m)).copy_from(p);
    if k > 0 {
        kkt.view_mut((m, 0), (k, m)).copy_from(&a);
        kkt.view_mut((0, m), (m, k)).copy_from(&a.transpose());
    }
    let mut rhs = DVector::zeros(n);
    rhs.rows_mut(0, m).copy_from(&(-q));
    rhs.rows_mut(m, k).copy_from(&b);

    let lu = kkt.clone().full_piv_lu();
    let diag = lu.u().diagonal();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
    for d in diag.iter() {
        dmin = dmin.min(d.abs());
        dmax = dmax.max(d.abs());
    }
    let rcond = if dmax > 0.0 { dmin / dmax } else { 0.0 };
    if !(rcond > 1e-14) {
        return Err(Error::SingularKkt { rcond });
    }
    let mut sol = lu.solve(&rhs).ok_or(Error::SingularKkt { rcond })?;
    // one step of iterative refinement
    let res = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&res) {
        sol += corr;
    }
    Ok(sol.rows(0, m).into_owned())
}

/// Drops linearly dependent rows of `a x = b`, returning an equivalent
/// full-row-rank system. Inconsistent dependent rows are rejected.
pub fn reduce_constraints(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    m: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = a.nrows();
    if k == 0 {
        return Ok((DMatrix::zeros(0, m), DVector::zeros(0)));
    }
    let svd = full_svd(a);
    let cut = cutoff(&svd.s, RANK_RTOL);
    let rank = svd.s.iter().take(k.min(m)).filter(|&&s| s > cut && s > 0.0).count();
    if rank == k {
        return Ok((a.clone(), b.clone()));
    }
    let ur = svd.u.columns(0, rank);
    let proj = &ur * (ur.transpose() * b);
    let resid = (b - &proj).norm();
    if resid > 1e-8 * (1.0 + b.norm()) {
        return Err(Error::Infeasible(format!(
            "redundant constraint rows disagree (residual {resid:.3e})"
        )));
    }
    let mut ar = DMatrix::zeros(rank, m);
    for i in 0..rank {
        ar.set_row(i, &(svd.v.column(i).transpose() * svd.s[i]));
    }
    Ok((ar, ur.transpose() * b))
}

/// Equality-constrained QP by nullspace elimination.
///
/// Tolerates a rank-deficient reduced Hessian: among minimizers it returns
/// the one of minimum norm, which makes it usable for unregularized
/// least-squares problems.
pub fn solve_eq_qp_nullspace(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = p.nrows();
    if !p.is_square() || q.len() != m || (a.nrows() > 0 && a.ncols() != m) || a.nrows() != b.len()
    {
        return Err(Error::Dimension(format!(
            "eq-QP shapes p {:?}, q {}, a {:?}, b {}",
            p.shape(),
            q.len(),
            a.shape(),
            b.len()
        )));
    }
    let a = if a.nrows() == 0 { DMatrix::zeros(0, m) } else { a.clone() };
    let sub = affine_solutions(&a, b, RANK_RTOL, 1e-8 * (1.0 + b.norm()))?;
    Ok(minimize_on_subspace(p, q, &sub))
}

/// Minimizer of `½xᵀpx + qᵀx` over an affine subspace.
pub fn minimize_on_subspace(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    sub: &AffineSubspace,
) -> DVector<f64> {
    if sub.free_dim() == 0 {
        return sub.particular.clone();
    }
    let n = &sub.basis;
    let reduced = symmetrize(&(n.transpose() * p * n));
    let rhs = -(n.transpose() * (p * &sub.particular + q));
    let w = solve_psd_min_norm(&reduced, &rhs);
    sub.point(&w)
}

/// Options for [`minimize_smooth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub multistart_count: usize,
    pub trust_radius_init: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            step_tol: 1e-12,
            multistart_count: 1,
            trust_radius_init: 1.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.grad_tol > 0.0)
            || !(self.step_tol > 0.0)
            || self.multistart_count == 0
            || !(self.trust_radius_init > 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

/// A smooth scalar objective. Without an analytic gradient, central finite
/// differences with step `1e-6·(1+|x_i|)` are used.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let f = self.value(x);
        let g = self.gradient(x).unwrap_or_else(|| fd_gradient(self, x, None));
        (f, g)
    }
}

impl<F: Fn(&DVector<f64>) -> f64> Objective for F {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self(x)
    }
}

/// Objective with an analytic gradient supplied as a second closure.
pub struct WithGradient<F, G>(pub F, pub G);

impl<F, G> Objective for WithGradient<F, G>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.0)(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some((self.1)(x))
    }
}

fn fd_gradient<O: Objective + ?Sized>(obj: &O, x: &DVector<f64>, h: Option<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h.unwrap_or(1e-6 * (1.0 + x[i].abs()));
        xp[i] = x[i] + step;
        let fp = obj.value(&xp);
        xp[i] = x[i] - step;
        let fm = obj.value(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Largest discrepancy between the analytic gradient and central finite
/// differences with step `h`, relative to `max(1, ‖∇f‖_∞)`.
pub fn check_gradient<O: Objective + ?Sized>(obj: &O, x: &DVector<f64>, h: f64) -> f64 {
    let (_, analytic) = obj.value_and_gradient(x);
    let fd = fd_gradient(obj, x, Some(h));
    let scale = analytic.amax().max(1.0);
    (&fd - &analytic).amax() / scale
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    /// Objective value at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// BFGS with backtracking (Armijo) line search.
///
/// With `multistart_count > 1` the extra starts are deterministic
/// perturbations of `x0` and the best run is returned.
pub fn minimize_smooth<O: Objective + ?Sized>(
    obj: &O,
    x0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<MinimizeResult> {
    opts.validate()?;
    let mut starts = vec![x0.clone()];
    for k in 1..opts.multistart_count {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let pert = DVector::from_fn(x0.len(), |i, _| {
            let xi: f64 = rng.random_range(-1.0..1.0);
            x0[i] + 0.1 * (1.0 + x0[i].abs()) * xi
        });
        starts.push(pert);
    }
    minimize_multistart(obj, &starts, opts)
}

/// Runs BFGS from each start and keeps the lowest final value. Starts with a
/// non-finite objective are skipped; an error is returned only if all fail.
pub fn minimize_multistart<O: Objective + ?Sized>(
    obj: &O,
    starts: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<MinimizeResult> {
    let mut best: Option<MinimizeResult> = None;
    let mut last_err = None;
    for x0 in starts {
        match bfgs(obj, x0, opts) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.value < b.value) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::InvalidArgument("no starting points".into()))
    })
}

fn bfgs<O: Objective + ?Sized>(
    obj: &O,
    x0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<MinimizeResult> {
    let n = x0.len();
    let mut x = x0.clone();
    let (mut f, mut g) = obj.value_and_gradient(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("objective {f} at the starting point")));
    }
    let mut trace = vec![f];
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if n == 0 || g.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }
        if fresh {
            // keep the first trial step at unit length
            let dn = d.norm();
            if dn > 1.0 {
                d /= dn;
                slope /= dn;
            }
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &d * alpha;
            let (fnew, gnew) = obj.value_and_gradient(&xn);
            if fnew.is_finite()
                && gnew.iter().all(|v| v.is_finite())
                && fnew <= f + 1e-4 * alpha * slope
            {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if !fresh {
                // retry along steepest descent before giving up
                hinv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            break;
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let step = s.norm();
        let fdecrease = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        trace.push(f);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
        if step <= opts.step_tol * (1.0 + x.norm())
            || (fdecrease <= 1e-15 * f.abs().max(1e-300) && g.amax() <= opts.grad_tol.sqrt())
        {
            converged = g.amax() <= opts.grad_tol.sqrt();
            break;
        }
    }
    if g.amax() <= opts.grad_tol {
        converged = true;
    }
    Ok(MinimizeResult { x, value: f, trace, iterations, converged })
}

/// Spectral radius from the real Schur form.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .schur()
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |m, l| m.max(l.norm()))
}

/// Solves `a P aᵀ − P + q = 0` via the vectorized `(I − a⊗a) vec P = vec q`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "lyapunov: a {:?}, q {:?}",
            a.shape(),
            q.shape()
        )));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 - 1e-9 {
        return Err(Error::Unstable(rho));
    }
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let lu = lhs.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("lyapunov operator".into()))?;
    let res = &rhs - &lhs * &x;
    if let Some(c) = lu.solve(&res) {
        x += c;
    }
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(symmetrize(&p))
}

/// Stable symmetric inverse through Cholesky, falling back to an LU inverse.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(symmetrize(&ch.inverse()));
    }
    a.clone()
        .try_inverse()
        .map(|m| symmetrize(&m))
        .ok_or_else(|| Error::Singular("symmetric inverse".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn eigen_route_svd_factors_rank_deficient_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (k, m, r) in [(6, 9, 3), (9, 6, 2), (8, 8, 8), (5, 7, 0), (12, 12, 6)] {
            let a = random_matrix(&mut rng, k, r) * random_matrix(&mut rng, r, m);
            for t in [svd_via_eigen(&a), thin_svd(&a)] {
                let p = k.min(m);
                let rec = &t.u * DMatrix::from_diagonal(&DVector::from_column_slice(&t.s)) * t.v.transpose();
                assert!(max_abs(&(rec - &a)) < 1e-12, "{k}x{m} rank {r}");
                assert!(max_abs(&(t.u.tr_mul(&t.u) - DMatrix::identity(p, p))) < 1e-12);
                assert!(max_abs(&(t.v.tr_mul(&t.v) - DMatrix::identity(p, p))) < 1e-12);
                assert!(t.s.windows(2).all(|w| w[0] >= w[1]));
                assert_eq!(t.s.iter().filter(|&&s| s > 1e-10 * t.s[0]).count(), r);
            }
        }
        // repeated singular values with an exact nullspace
        let mut a = DMatrix::zeros(10, 10);
        for i in 0..5 {
            a[(i, i)] = 1.0;
            a[(i, i + 5)] = 1.0;
        }
        let t = svd_via_eigen(&a);
        assert!(t.s[..5].iter().all(|s| (s - 2f64.sqrt()).abs() < 1e-14));
        assert!(t.s[5..].iter().all(|&s| s == 0.0));
        let f = full_svd(&a);
        assert!(max_abs(&(&a * f.v.columns(5, 5))) < 1e-14);
    }

    fn orthonormality_error(d: &PsdDecomposition) -> f64 {
        let m = d.dim();
        let mut u = DMatrix::zeros(m, m);
        u.view_mut((0, 0), (m, d.rank)).copy_from(&d.u1);
        u.view_mut((0, d.rank), (m, m - d.rank)).copy_from(&d.u2);
        max_abs(&(u.transpose() * u - DMatrix::identity(m, m)))
    }

    #[test]
    fn decompose_identity() {
        let d = decompose_psd(&DMatrix::identity(3, 3), 1e-10).unwrap();
        assert_eq!(d.rank, 3);
        assert_eq!(d.u2.ncols(), 0);
        assert_abs_diff_eq!(d.sigma1, DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn decompose_diagonal_singular() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let d = decompose_psd(&s, 1e-10).unwrap();
        assert_eq!(d.rank, 1);
        assert_abs_diff_eq!(d.sigma1[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.u1[(0, 0)].abs(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.u2[(1, 0)].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn decompose_rank_one() {
        let v = DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let s = &v * v.transpose();
        let d = decompose_psd(&s, 1e-10).unwrap();
        assert_eq!(d.rank, 1);
        assert_abs_diff_eq!(d.sigma1[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.u1.column(0).dot(&v).abs(), 1.0, epsilon = 1e-12);
        assert!(orthonormality_error(&d) <= 1e-10);
        assert!(max_abs(&(d.reconstruct() - s)) <= 10.0 * 1e-10);
    }

    #[test]
    fn decompose_rejects_bad_input() {
        let ns = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(decompose_psd(&ns, 1e-10), Err(Error::NotSymmetric { .. })));
        let indef = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(decompose_psd(&indef, 1e-10), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn decompose_random_psd_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = rng.random_range(1..=8);
            let r = rng.random_range(0..=m);
            let f = random_matrix(&mut rng, m, r);
            let s = &f * f.transpose();
            let tol = default_rank_tol(&s).max(1e-14);
            let d = decompose_psd(&s, tol).unwrap();
            assert!(orthonormality_error(&d) <= 1e-10);
            assert!(max_abs(&(d.reconstruct() - &s)) <= 10.0 * tol + 1e-14);
            assert!(d.eigenvalues().iter().all(|&l| l > tol));
        }
    }

    #[test]
    fn eq_qp_projection_and_unconstrained() {
        let p = DMatrix::identity(2, 2);
        let x = solve_eq_qp(
            &p,
            &DVector::zeros(2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(x, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);

        let x = solve_eq_qp(
            &p,
            &DVector::from_vec(vec![-2.0, 0.0]),
            &DMatrix::zeros(0, 2),
            &DVector::zeros(0),
        )
        .unwrap();
        assert_abs_diff_eq!(x, DVector::from_vec(vec![2.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn eq_qp_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_matrix(&mut rng, 3, 3);
        let p = &f * f.transpose() + DMatrix::identity(3, 3);
        let q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let a = random_matrix(&mut rng, 1, 3);
        let b = DVector::from_vec(vec![0.3]);
        let x = solve_eq_qp(&p, &q, &a, &b).unwrap();

        // Oracle: grid over the 2-D feasible plane, refined around the best point.
        let sub = affine_solutions(&a, &b, 1e-12, 1e-10).unwrap();
        let obj = |w: &DVector<f64>| {
            let z = sub.point(w);
            0.5 * z.dot(&(&p * &z)) + q.dot(&z)
        };
        let mut center = DVector::zeros(2);
        let mut half = 4.0;
        for _ in 0..40 {
            let mut best = (f64::INFINITY, center.clone());
            for i in 0..=20 {
                for j in 0..=20 {
                    let w = DVector::from_vec(vec![
                        center[0] - half + half * i as f64 / 10.0,
                        center[1] - half + half * j as f64 / 10.0,
                    ]);
                    let v = obj(&w);
                    if v < best.0 {
                        best = (v, w);
                    }
                }
            }
            center = best.1;
            half *= 0.5;
        }
        let oracle = sub.point(&center);
        assert_abs_diff_eq!(x, oracle, epsilon = 1e-8);
    }

    #[test]
    fn eq_qp_redundant_rows_and_infeasible() {
        let p = DMatrix::identity(3, 3);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let x = solve_eq_qp(&p, &DVector::zeros(3), &a, &DVector::from_vec(vec![1.0, 2.0]))
            .unwrap();
        assert_abs_diff_eq!(x, DVector::from_vec(vec![0.5, 0.5, 0.0]), epsilon = 1e-12);
        let err = solve_eq_qp(&p, &DVector::zeros(3), &a, &DVector::from_vec(vec![1.0, 3.0]));
        assert!(matches!(err, Err(Error::Infeasible(_))));
        let err = solve_eq_qp(&p, &DVector::zeros(2), &a, &DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn eq_qp_singular_kkt_reported() {
        let p = DMatrix::zeros(2, 2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let err = solve_eq_qp(&p, &DVector::zeros(2), &a, &DVector::from_vec(vec![1.0]));
        assert!(matches!(err, Err(Error::SingularKkt { .. })));
        // the nullspace variant returns the minimum-norm minimizer instead
        let x =
            solve_eq_qp_nullspace(&p, &DVector::zeros(2), &a, &DVector::from_vec(vec![1.0]))
                .unwrap();
        assert_abs_diff_eq!(x, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn eq_qp_feasible_and_optimal_against_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = 5;
            let f = random_matrix(&mut rng, m, m);
            let p = &f * f.transpose() + DMatrix::identity(m, m) * 0.1;
            let q = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let a = random_matrix(&mut rng, 2, m);
            let b = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let x = solve_eq_qp(&p, &q, &a, &b).unwrap();
            let xn = solve_eq_qp_nullspace(&p, &q, &a, &b).unwrap();
            assert_abs_diff_eq!(x, xn, epsilon = 1e-9);
            assert!((&a * &x - &b).norm() <= 1e-10 * (1.0 + b.norm()));
            let obj = |z: &DVector<f64>| 0.5 * z.dot(&(&p * z)) + q.dot(z);
            let sub = affine_solutions(&a, &DVector::zeros(2), 1e-12, 1e-10).unwrap();
            for _ in 0..100 {
                let w = DVector::from_fn(sub.free_dim(), |_, _| rng.random_range(-0.1..0.1));
                let y = &x + &sub.basis * w;
                assert!(obj(&x) <= obj(&y) + 1e-12);
            }
        }
    }

    #[test]
    fn minimize_quadratic_bowl() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cc = c.clone();
        let obj = WithGradient(
            move |x: &DVector<f64>| (x - &c).norm_squared(),
            move |x: &DVector<f64>| (x - &cc) * 2.0,
        );
        let r = minimize_smooth(&obj, &DVector::zeros(3), &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(r.x, DVector::from_vec(vec![1.0, -2.0, 0.5]), epsilon = 1e-8);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn minimize_rosenbrock() {
        let obj = WithGradient(
            |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            |x: &DVector<f64>| {
                DVector::from_vec(vec![
                    -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                    200.0 * (x[1] - x[0] * x[0]),
                ])
            },
        );
        let opts = SolverOptions { max_iters: 2000, ..Default::default() };
        let r = minimize_smooth(&obj, &DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert_abs_diff_eq!(r.x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-4);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));

        // finite-difference gradients also get there
        let fd = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize_smooth(&fd, &DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert_abs_diff_eq!(r.x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-4);
    }

    #[test]
    fn minimize_constant_objective() {
        let obj = |_: &DVector<f64>| 3.0;
        let x0 = DVector::from_vec(vec![0.3, -0.7]);
        let r = minimize_smooth(&obj, &x0, &SolverOptions::default()).unwrap();
        assert_eq!(r.x, x0);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn minimize_reports_non_finite_start() {
        let obj = |_: &DVector<f64>| f64::NAN;
        let err = minimize_smooth(&obj, &DVector::zeros(1), &SolverOptions::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn multistart_returns_best() {
        // double well with the deeper minimum near x = −1
        let obj = WithGradient(
            |x: &DVector<f64>| (x[0] * x[0] - 1.0).powi(2) + 0.2 * x[0],
            |x: &DVector<f64>| DVector::from_vec(vec![4.0 * x[0] * (x[0] * x[0] - 1.0) + 0.2]),
        );
        let starts = [DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])];
        let r = minimize_multistart(&obj, &starts, &SolverOptions::default()).unwrap();
        assert!(r.x[0] < 0.0);
    }

    #[test]
    fn lyapunov_cases() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &q).unwrap();
        assert_abs_diff_eq!(p, q, epsilon = 1e-14);

        let p = solve_discrete_lyapunov(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);

        let err = solve_discrete_lyapunov(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        );
        assert!(matches!(err, Err(Error::Unstable(_))));
    }

    #[test]
    fn lyapunov_residual_random_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = 4;
            let mut a = random_matrix(&mut rng, n, n);
            let rho = spectral_radius(&a);
            a *= rng.random_range(0.1..0.95) / rho;
            let f = random_matrix(&mut rng, n, n);
            let q = &f * f.transpose();
            let p = solve_discrete_lyapunov(&a, &q).unwrap();
            let res = &a * &p * a.transpose() - &p + &q;
            assert!(res.norm() <= 1e-10 * q.norm());
        }
    }

    #[test]
    fn gradient_checks() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let aa = a.clone();
        let quad = WithGradient(
            move |x: &DVector<f64>| 0.5 * x.dot(&(&a * x)),
            move |x: &DVector<f64>| &aa * x,
        );
        let x = DVector::from_vec(vec![0.7, -1.3]);
        assert!(check_gradient(&quad, &x, 1e-5) <= 1e-6);

        let lin = WithGradient(
            |x: &DVector<f64>| 2.0 * x[0] - 3.0 * x[1],
            |_: &DVector<f64>| DVector::from_vec(vec![2.0, -3.0]),
        );
        assert!(check_gradient(&lin, &x, 1e-5) <= 1e-10);

        let wrong = WithGradient(
            |x: &DVector<f64>| x[0] * x[0],
            |_: &DVector<f64>| DVector::from_vec(vec![0.0]),
        );
        assert!(check_gradient(&wrong, &DVector::from_vec(vec![1.0]), 1e-5) > 0.5);
    }

    #[test]
    fn pinv_and_rank() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(numerical_rank(&a, RANK_RTOL), 2);
        let p = pinv(&a, RANK_RTOL);
        assert_abs_diff_eq!(&a * &p, DMatrix::identity(2, 2), epsilon = 1e-14);
        let sub = affine_solutions(&a, &DVector::from_vec(vec![1.0, 4.0]), RANK_RTOL, 1e-10)
            .unwrap();
        assert_eq!(sub.free_dim(), 1);
        assert_abs_diff_eq!(sub.particular, DVector::from_vec(vec![1.0, 2.0, 0.0]), epsilon = 1e-14);

        // tall, rank-deficient but consistent
        let tall = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let sub = affine_solutions(&tall, &DVector::from_vec(vec![1.0, 2.0, 3.0]), RANK_RTOL, 1e-10)
            .unwrap();
        assert_eq!(sub.rank, 1);
        assert_eq!(sub.free_dim(), 1);
        assert_abs_diff_eq!(sub.basis.column(0).norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&tall * &sub.basis).norm(), 0.0, epsilon = 1e-12);
    }
}
