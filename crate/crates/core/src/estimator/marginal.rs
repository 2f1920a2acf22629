//! Marginal likelihood of `g` and the local models used by the SQP iteration.
//!
//! With `Δ_H g` and `ε` combined, `ζ − ΦHg` has scale
//! `Ψ(g) = ΦΣ_g(g)Φᵀ + Σ_ε`. Directions where `Ψ` vanishes for every `g`
//! become hard constraints `U₂ᵀ(ζ − ΦHg) = 0` and are eliminated once per
//! problem; the objective is evaluated on the remaining `r` directions:
//!
//! `J(g) = ½ log det Ψ₁(g) − log f(‖δ̄(g)‖²_{Ψ₁⁻¹}, r)`.
//!
//! This keeps the exact negative log-likelihood, i.e. half of the usual
//! Gaussian `log det Ψ + ‖δ‖²_{Ψ⁻¹}` up to a constant; minimizers agree.
//!
//! For window offsets `t_k`, `Σ_g(g)` has `(i, j)` block `T(j−i)` with
//! `T(e) = Σ_d W(d) Σ_ν(|d − e|)` and `W(d) = Σ_{t_k − t_m = d} g_k g_m`.
//! The same lag structure gives the gradient in `O(M² + L²n²)`.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{PriorScale, ScaleMethod};
use crate::error::{Error, Result};
use crate::numerics::{self, AffineSubspace, RANK_RTOL};
use crate::sigdata::{Construction, SignalMatrix};
use crate::tasks::TaskSpec;
use crate::uncertainty::{EllipticalFamily, NoiseModel};

#[derive(Debug, Clone)]
enum Reduction {
    /// Keep these observation rows (the vanishing directions are rows).
    Select(Vec<usize>),
    /// Project with `U₁ᵀ`.
    Project(DMatrix<f64>),
}

/// Everything needed to evaluate `J(g)` repeatedly for one task.
#[derive(Debug, Clone)]
pub struct MarginalProblem {
    family: EllipticalFamily,
    n: usize,
    l: usize,
    construction: Construction,
    offsets: Vec<usize>,
    /// Largest `|t_k − t_m|`.
    span: usize,
    /// Distinct `|t_k − t_m|`.
    diffs: Vec<usize>,
    /// `Σ_ν(τ)` column-major, `τ = 0..=T_c`.
    lags: Vec<Vec<f64>>,
    /// `(time, channel)` of every observation row.
    coords: Vec<(usize, usize)>,
    reduction: Reduction,
    sigma_eps: DMatrix<f64>,
    /// Reduced `Φ H`, `ζ` and `Σ_ε`.
    a: DMatrix<f64>,
    zeta_r: DVector<f64>,
    sigma_eps_r: DMatrix<f64>,
    h_cols: usize,
    phi_h: DMatrix<f64>,
    zeta: DVector<f64>,
    feasible: AffineSubspace,
    pinv: DVector<f64>,
}

/// Quadratic model of `J` at `g_k` for the SQP step
/// `min gᵀCg + ω‖ζ̄ − Ag‖²_{Ψ₁⁻¹}` over the feasible set.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub c: DMatrix<f64>,
    pub psi_inv: DMatrix<f64>,
    pub omega: f64,
    /// Diagonal entry of the log-determinant part of `C`.
    pub logdet_diag: f64,
}

struct Factored {
    value: f64,
    psi_inv: Option<DMatrix<f64>>,
    alpha: DVector<f64>,
    omega: f64,
}

impl MarginalProblem {
    pub fn new(task: &TaskSpec, h: &SignalMatrix, model: &NoiseModel) -> Result<Self> {
        if h.l != task.l || h.n_u != task.n_u || h.n_y != task.n_y {
            return Err(Error::Dimension(format!(
                "signal matrix (L={}, n_u={}, n_y={}) does not match task (L={}, n_u={}, n_y={})",
                h.l, h.n_u, h.n_y, task.l, task.n_u, task.n_y
            )));
        }
        if model.n_u() != task.n_u || model.n_y() != task.n_y {
            return Err(Error::Dimension("noise model channels do not match the task".into()));
        }
        let n = task.n();
        let lags = (0..=model.decay_horizon())
            .map(|t| model.block(t).map(|b| b.as_slice().to_vec()).unwrap_or_default())
            .collect();
        let lo = *h.offsets.iter().min().unwrap_or(&0);
        let hi = *h.offsets.iter().max().unwrap_or(&0);
        let mut seen = vec![false; hi - lo + 1];
        for &a in &h.offsets {
            for &b in &h.offsets {
                seen[a.abs_diff(b)] = true;
            }
        }
        let diffs = (0..seen.len()).filter(|&d| seen[d]).collect();
        let phi_h = task.observe_rows(&h.h);
        let pinv = numerics::pinv(&phi_h, RANK_RTOL) * &task.zeta;
        let p = task.p();
        let mut prob = Self {
            family: task.family,
            n,
            l: task.l,
            construction: h.construction,
            offsets: h.offsets.clone(),
            span: hi - lo,
            diffs,
            lags,
            coords: task.rows.iter().map(|&i| (i / n, i % n)).collect(),
            reduction: Reduction::Select((0..p).collect()),
            sigma_eps: task.sigma_eps.clone(),
            a: phi_h.clone(),
            zeta_r: task.zeta.clone(),
            sigma_eps_r: task.sigma_eps.clone(),
            h_cols: h.m(),
            phi_h,
            zeta: task.zeta.clone(),
            feasible: AffineSubspace::unconstrained(h.m()),
            pinv,
        };

        // vanishing directions of Ψ at a generic g
        let scale = (1.0 + prob.pinv.norm()) / (h.m() as f64).sqrt();
        let generic = &prob.pinv + DVector::from_fn(h.m(), |k, _| scale * (1.0 + 0.5 * (k as f64).sin()));
        let psi = prob.psi_full(&generic);
        let dec = numerics::decompose_psd_default(&psi)?;
        let zero_rows: Vec<usize> =
            (0..p).filter(|&a| psi.row(a).iter().all(|&v| v == 0.0)).collect();
        let (c_mat, c_rhs) = if zero_rows.len() == p - dec.rank {
            let kept: Vec<usize> = (0..p).filter(|a| !zero_rows.contains(a)).collect();
            prob.reduction = Reduction::Select(kept);
            let cm = DMatrix::from_fn(zero_rows.len(), h.m(), |i, j| prob.phi_h[(zero_rows[i], j)]);
            let cr = DVector::from_fn(zero_rows.len(), |i, _| prob.zeta[zero_rows[i]]);
            (cm, cr)
        } else {
            prob.reduction = Reduction::Project(dec.u1.transpose());
            (dec.u2.transpose() * &prob.phi_h, dec.u2.transpose() * &prob.zeta)
        };
        prob.feasible =
            numerics::affine_solutions(&c_mat, &c_rhs, RANK_RTOL, 1e-8 * (1.0 + prob.zeta.norm()))?;
        prob.a = prob.reduce_rows(&prob.phi_h);
        prob.zeta_r = prob.reduce_vec(&prob.zeta);
        prob.sigma_eps_r = prob.reduce_sym(&prob.sigma_eps);
        Ok(prob)
    }

    /// Number of retained observation directions `r`.
    pub fn rank(&self) -> usize {
        self.zeta_r.len()
    }

    /// `{g : U₂ᵀ(ζ − ΦHg) = 0}`.
    pub fn feasible(&self) -> &AffineSubspace {
        &self.feasible
    }

    /// Minimum-norm least-squares solution of `ΦH g = ζ`.
    pub fn pinv(&self) -> &DVector<f64> {
        &self.pinv
    }

    pub fn phi_h(&self) -> &DMatrix<f64> {
        &self.phi_h
    }

    /// Orthogonal projection of `g` onto the feasible set.
    pub fn project(&self, g: &DVector<f64>) -> DVector<f64> {
        let n = &self.feasible.basis;
        &self.feasible.particular + n * (n.tr_mul(&(g - &self.feasible.particular)))
    }

    /// `‖U₂ᵀ(ζ − ΦHg)‖`.
    pub fn constraint_violation(&self, g: &DVector<f64>) -> f64 {
        let delta = &self.zeta - &self.phi_h * g;
        match &self.reduction {
            Reduction::Select(kept) => (0..delta.len())
                .filter(|a| !kept.contains(a))
                .map(|a| delta[a] * delta[a])
                .sum::<f64>()
                .sqrt(),
            Reduction::Project(u1t) => (&delta - u1t.tr_mul(&(u1t * &delta))).norm(),
        }
    }

    fn reduce_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.reduction {
            Reduction::Select(kept) => DMatrix::from_fn(kept.len(), m.ncols(), |i, j| m[(kept[i], j)]),
            Reduction::Project(u1t) => u1t * m,
        }
    }

    fn reduce_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.reduction {
            Reduction::Select(kept) => DVector::from_fn(kept.len(), |i, _| v[kept[i]]),
            Reduction::Project(u1t) => u1t * v,
        }
    }

    fn reduce_sym(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.reduction {
            Reduction::Select(kept) => DMatrix::from_fn(kept.len(), kept.len(), |i, j| s[(kept[i], kept[j])]),
            Reduction::Project(u1t) => numerics::symmetrize(&(u1t * s * u1t.transpose())),
        }
    }

    /// Lag weights indexed by `|d|`, `d = 0..=span`.
    fn lag_weights(&self, g: &DVector<f64>) -> Vec<f64> {
        let mut w = vec![0.0; self.span + 1];
        for (k, &tk) in self.offsets.iter().enumerate() {
            if g[k] == 0.0 {
                continue;
            }
            for (m, &tm) in self.offsets.iter().enumerate() {
                w[tk.abs_diff(tm)] += g[k] * g[m];
            }
        }
        // for d > 0 the entry holds W(d) + W(−d)
        w
    }

    /// `T(e)`, `e = 0..L−1`, each `n×n` column-major.
    fn toeplitz(&self, w: &[f64]) -> Vec<f64> {
        let nn = self.n * self.n;
        let t_c = self.lags.len() as isize - 1;
        let mut t = vec![0.0; self.l * nn];
        for e in 0..self.l as isize {
            let out = &mut t[e as usize * nn..(e as usize + 1) * nn];
            for &d in &self.diffs {
                let wd = w[d];
                if wd == 0.0 {
                    continue;
                }
                let signs: &[isize] = if d == 0 { &[0] } else { &[1, -1] };
                for &sign in signs {
                    let sd = sign * d as isize;
                    let lag = (sd - e).abs();
                    if lag > t_c {
                        continue;
                    }
                    let coef = if d == 0 { wd } else { 0.5 * wd };
                    for (o, b) in out.iter_mut().zip(&self.lags[lag as usize]) {
                        *o += coef * b;
                    }
                }
            }
        }
        t
    }

    /// `Σ_g(g)` assembled from the lag structure.
    pub fn prior_scale(&self, g: &DVector<f64>) -> PriorScale {
        let t = self.toeplitz(&self.lag_weights(g));
        let (n, l) = (self.n, self.l);
        let nn = n * n;
        let s = DMatrix::from_fn(n * l, n * l, |r, c| {
            let (i, ci) = (r / n, r % n);
            let (j, cj) = (c / n, c % n);
            t[i.abs_diff(j) * nn + ci + cj * n]
        });
        let method = match self.construction {
            Construction::Custom => ScaleMethod::General,
            _ => ScaleMethod::FastPageHankel,
        };
        PriorScale { sigma_g: numerics::symmetrize(&s), g_norm_sq: g.norm_squared(), method }
    }

    /// `Ψ(g) = ΦΣ_g(g)Φᵀ + Σ_ε` over all observation rows.
    pub fn psi_full(&self, g: &DVector<f64>) -> DMatrix<f64> {
        let t = self.toeplitz(&self.lag_weights(g));
        let p = self.coords.len();
        let n = self.n;
        let nn = n * n;
        let mut psi = self.sigma_eps.clone();
        for a in 0..p {
            let (i, ci) = self.coords[a];
            for b in 0..p {
                let (j, cj) = self.coords[b];
                psi[(a, b)] += t[i.abs_diff(j) * nn + ci + cj * n];
            }
        }
        psi
    }

    /// Reduced `Ψ₁(g)`.
    pub fn psi_reduced(&self, g: &DVector<f64>) -> DMatrix<f64> {
        match &self.reduction {
            Reduction::Select(kept) => {
                let t = self.toeplitz(&self.lag_weights(g));
                let n = self.n;
                let nn = n * n;
                let r = kept.len();
                let mut psi = self.sigma_eps_r.clone();
                for a in 0..r {
                    let (i, ci) = self.coords[kept[a]];
                    for b in 0..r {
                        let (j, cj) = self.coords[kept[b]];
                        psi[(a, b)] += t[i.abs_diff(j) * nn + ci + cj * n];
                    }
                }
                psi
            }
            Reduction::Project(_) => self.reduce_sym(&self.psi_full(g)),
        }
    }

    fn factor(&self, g: &DVector<f64>, want_inverse: bool) -> Option<Factored> {
        let r = self.rank();
        let delta = &self.zeta_r - &self.a * g;
        if r == 0 {
            return Some(Factored {
                value: -self.family.log_radial(0.0, 0),
                psi_inv: want_inverse.then(|| DMatrix::zeros(0, 0)),
                alpha: DVector::zeros(0),
                omega: -self.family.log_radial_slope(0.0, 0),
            });
        }
        let psi = self.psi_reduced(g);
        let ch = psi.cholesky()?;
        let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let alpha = ch.solve(&delta);
        let x = delta.dot(&alpha);
        let value = 0.5 * logdet - self.family.log_radial(x, r);
        if !value.is_finite() {
            return None;
        }
        Some(Factored {
            value,
            psi_inv: want_inverse.then(|| ch.inverse()),
            alpha,
            omega: -self.family.log_radial_slope(x, r),
        })
    }

    /// `J(g)`, `+∞` where `Ψ₁(g)` is not positive definite or `g` violates
    /// the hard constraints.
    pub fn value(&self, g: &DVector<f64>) -> f64 {
        if self.constraint_violation(g) > 1e-8 * (1.0 + self.zeta.norm()) {
            return f64::INFINITY;
        }
        self.factor(g, false).map_or(f64::INFINITY, |f| f.value)
    }

    /// Lag sums `Ŝ(e) = Σ_{j−i=e} S̄_{ij}` of a reduced symmetric matrix,
    /// `e = −(L−1)..=L−1`, each `n×n` column-major.
    fn diagonal_sums(&self, s: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n;
        let nn = n * n;
        let l = self.l as isize;
        let mut out = vec![0.0; (2 * self.l - 1) * nn];
        let mut add = |ra: usize, rb: usize, v: f64| {
            let (i, ci) = self.coords[ra];
            let (j, cj) = self.coords[rb];
            let e = j as isize - i as isize + l - 1;
            out[e as usize * nn + ci + cj * n] += v;
        };
        match &self.reduction {
            Reduction::Select(kept) => {
                for (a, &ra) in kept.iter().enumerate() {
                    for (b, &rb) in kept.iter().enumerate() {
                        add(ra, rb, s[(a, b)]);
                    }
                }
            }
            Reduction::Project(u1t) => {
                let full = u1t.tr_mul(&(s * u1t));
                let p = full.nrows();
                for a in 0..p {
                    for b in 0..p {
                        add(a, b, full[(a, b)]);
                    }
                }
            }
        }
        out
    }

    /// `G(d) = Σ_e ⟨Ŝ(e), Σ_ν(|d−e|)⟩` for `d = 0..=span`, filled at the
    /// distinct offset differences.
    fn lag_contractions(&self, shat: &[f64]) -> Vec<f64> {
        let nn = self.n * self.n;
        let l = self.l as isize;
        let t_c = self.lags.len() as isize - 1;
        let mut g = vec![0.0; self.span + 1];
        for &d in &self.diffs {
            let mut acc = 0.0;
            for e in -(l - 1)..l {
                let lag = (d as isize - e).abs();
                if lag > t_c {
                    continue;
                }
                let s = &shat[(e + l - 1) as usize * nn..(e + l) as usize * nn];
                acc += s.iter().zip(&self.lags[lag as usize]).map(|(a, b)| a * b).sum::<f64>();
            }
            g[d] = acc;
        }
        g
    }

    /// `J(g)` and its gradient with respect to `g`.
    pub fn value_and_gradient(&self, g: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.h_cols;
        if self.constraint_violation(g) > 1e-8 * (1.0 + self.zeta.norm()) {
            return (f64::INFINITY, DVector::from_element(m, f64::NAN));
        }
        let Some(f) = self.factor(g, true) else {
            return (f64::INFINITY, DVector::from_element(m, f64::NAN));
        };
        let psi_inv = f.psi_inv.as_ref().expect("inverse requested");
        let s = psi_inv * 0.5 - &f.alpha * f.alpha.transpose() * f.omega;
        let gd = self.lag_contractions(&self.diagonal_sums(&s));
        let ata = self.a.tr_mul(&f.alpha);
        let grad = DVector::from_fn(m, |k, _| {
            let tk = self.offsets[k];
            let mut acc = 0.0;
            for (j, &tj) in self.offsets.iter().enumerate() {
                acc += gd[tk.abs_diff(tj)] * g[j];
            }
            2.0 * acc - 2.0 * f.omega * ata[k]
        });
        (f.value, grad)
    }

    /// Local model at `g` (`None` where `Ψ₁(g)` is not positive definite).
    pub fn local_model(&self, g: &DVector<f64>) -> Option<LocalModel> {
        let m = self.h_cols;
        let f = self.factor(g, true)?;
        let psi_inv = f.psi_inv.expect("inverse requested");
        let half = &psi_inv * 0.5;
        let g_ld = self.lag_contractions(&self.diagonal_sums(&half));
        let g_da = self.lag_contractions(&self.diagonal_sums(&(&f.alpha * f.alpha.transpose())));
        let gd: Vec<f64> = g_ld.iter().zip(&g_da).map(|(a, b)| a - f.omega * b).collect();
        let c = DMatrix::from_fn(m, m, |k, j| gd[self.offsets[k].abs_diff(self.offsets[j])]);
        let ata = self.a.tr_mul(&f.alpha);
        let gradient = &c * g * 2.0 - ata * (2.0 * f.omega);
        Some(LocalModel {
            value: f.value,
            gradient,
            c,
            psi_inv,
            omega: f.omega,
            logdet_diag: g_ld[0],
        })
    }

    /// Minimizer of `gᵀCg + lᵀg + ω‖ζ̄ − Ag‖²_{Ψ₁⁻¹} + μ‖g − center‖²` over
    /// the feasible set; `lin = None` means `l = 0`.
    pub fn quadratic_step(
        &self,
        c: &DMatrix<f64>,
        lin: Option<&DVector<f64>>,
        psi_inv: &DMatrix<f64>,
        omega: f64,
        mu: f64,
        center: &DVector<f64>,
    ) -> DVector<f64> {
        let m = self.h_cols;
        let wa = psi_inv * &self.a;
        let mut p = (c + self.a.tr_mul(&wa) * omega) * 2.0;
        let mut q = -(wa.tr_mul(&self.zeta_r) * (2.0 * omega));
        if let Some(l) = lin {
            q += l;
        }
        if mu > 0.0 {
            p += DMatrix::identity(m, m) * (2.0 * mu);
            q -= center * (2.0 * mu);
        }
        numerics::minimize_on_subspace(&numerics::symmetrize(&p), &q, &self.feasible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{sigma_d, sigma_g_fast, sigma_g_general};
    use crate::lti::random_system;
    use crate::numerics::{check_gradient, WithGradient};
    use crate::sigdata::{build_signal_matrix, Trajectory};
    use crate::tasks::{build_prediction, build_smoothing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, len: usize, n_u: usize, n_y: usize) -> Trajectory {
        let u = (0..len).map(|_| DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0))).collect();
        let y = (0..len).map(|_| DVector::from_fn(n_y, |_, _| rng.random_range(-1.0..1.0))).collect();
        Trajectory::new(u, y).unwrap()
    }

    fn smoothing_problem(
        rng: &mut ChaCha8Rng,
        construction: Construction,
        model: &NoiseModel,
    ) -> (TaskSpec, SignalMatrix) {
        let l = 4;
        let offline = random_traj(rng, 24, model.n_u(), model.n_y());
        let h = build_signal_matrix(&offline, l, construction).unwrap();
        let online = random_traj(rng, l, model.n_u(), model.n_y());
        let task = build_smoothing(&online, model).unwrap();
        (task, h)
    }

    #[test]
    fn prior_scale_matches_covariance_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NoiseModel::exponential_decay(
            EllipticalFamily::Gaussian,
            DMatrix::identity(1, 1) * 0.3,
            DMatrix::identity(1, 1) * 0.5,
            0.6,
            Some(5),
        )
        .unwrap();
        for construction in [Construction::Page, Construction::Hankel] {
            let (task, h) = smoothing_problem(&mut rng, construction, &model);
            let prob = MarginalProblem::new(&task, &h, &model).unwrap();
            let g = DVector::from_fn(h.m(), |_, _| rng.random_range(-1.0..1.0));
            let ours = prob.prior_scale(&g).sigma_g;
            let fast = sigma_g_fast(&g, &model, construction, h.l).unwrap().sigma_g;
            assert!((&ours - &fast).amax() <= 1e-12 * fast.amax());
        }
        let offline = random_traj(&mut rng, 20, 1, 1);
        let h = SignalMatrix::from_offsets(&offline, 3, vec![0, 2, 7, 11, 16]).unwrap();
        let online = random_traj(&mut rng, 3, 1, 1);
        let task = build_smoothing(&online, &model).unwrap();
        let prob = MarginalProblem::new(&task, &h, &model).unwrap();
        let g = DVector::from_fn(h.m(), |_, _| rng.random_range(-1.0..1.0));
        let general = sigma_g_general(&g, &sigma_d(&model, &h.offsets, 3).unwrap()).unwrap().sigma_g;
        assert!((&prob.prior_scale(&g).sigma_g - &general).amax() <= 1e-12 * general.amax());
    }

    #[test]
    fn identity_scale_value_is_half_squared_residual() {
        // Σ_g = 0 and Σ_ε = I make Ψ = I
        let model = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 1.0, 1.0).unwrap();
        let zero = NoiseModel::zero(EllipticalFamily::Gaussian, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (task, h) = smoothing_problem(&mut rng, Construction::Hankel, &model);
        let prob = MarginalProblem::new(&task, &h, &zero).unwrap();
        let g = DVector::from_fn(h.m(), |_, _| rng.random_range(-1.0..1.0));
        let delta = &task.zeta - &h.h * &g;
        let expected = 0.5 * delta.norm_squared() + 0.5 * task.p() as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((prob.value(&g) - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.2, 0.3).unwrap(),
            NoiseModel::iid_scalar(EllipticalFamily::student_t(5.0).unwrap(), 1, 1, 0.2, 0.3).unwrap(),
            NoiseModel::exponential_decay(
                EllipticalFamily::Gaussian,
                DMatrix::identity(1, 1) * 0.1,
                DMatrix::identity(1, 1) * 0.4,
                0.7,
                Some(6),
            )
            .unwrap(),
            NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, 0.3).unwrap(),
        ];
        for model in &cases {
            for construction in [Construction::Page, Construction::Hankel] {
                let (task, h) = smoothing_problem(&mut rng, construction, model);
                let prob = MarginalProblem::new(&task, &h, model).unwrap();
                for _ in 0..5 {
                    let w = DVector::from_fn(prob.feasible().free_dim(), |_, _| rng.random_range(-1.0..1.0));
                    let g = prob.feasible().point(&w);
                    let obj = WithGradient(|g: &DVector<f64>| prob.value(g), |g: &DVector<f64>| prob.value_and_gradient(g).1);
                    // finite differences leave the feasible set when constraints exist
                    let err = if prob.feasible().rank == 0 {
                        check_gradient(&obj, &g, 1e-6)
                    } else {
                        let n = prob.feasible().basis.clone();
                        let red = WithGradient(
                            |w: &DVector<f64>| prob.value(&prob.feasible().point(w)),
                            |w: &DVector<f64>| n.tr_mul(&prob.value_and_gradient(&prob.feasible().point(w)).1),
                        );
                        check_gradient(&red, &w, 1e-6)
                    };
                    assert!(err < 1e-5, "{construction:?} {err}");
                }
            }
        }
    }

    #[test]
    fn local_model_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = NoiseModel::exponential_decay(
            EllipticalFamily::Gaussian,
            DMatrix::identity(1, 1) * 0.1,
            DMatrix::identity(1, 1) * 0.4,
            0.5,
            Some(3),
        )
        .unwrap();
        let (task, h) = smoothing_problem(&mut rng, Construction::Hankel, &model);
        let prob = MarginalProblem::new(&task, &h, &model).unwrap();
        let g = DVector::from_fn(h.m(), |_, _| rng.random_range(-1.0..1.0));
        let lm = prob.local_model(&g).unwrap();
        let (v, grad) = prob.value_and_gradient(&g);
        assert!((lm.value - v).abs() < 1e-12);
        assert!((&lm.gradient - &grad).amax() < 1e-10 * (1.0 + grad.amax()));
        assert!(lm.logdet_diag > 0.0);
    }

    #[test]
    fn exact_inputs_become_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(2, 1, 1, &mut rng).unwrap();
        let model = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, 0.01).unwrap();
        let u: Vec<_> = (0..30).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect();
        let y = sys.simulate(&u, &DVector::zeros(2)).unwrap();
        let h = build_signal_matrix(&Trajectory::new(u, y).unwrap(), 6, Construction::Hankel).unwrap();
        let init = random_traj(&mut rng, 3, 1, 1);
        let fut: Vec<_> = (0..3).map(|_| DVector::from_element(1, 0.3)).collect();
        let task = build_prediction(&init, &fut, &model, 2).unwrap();
        let prob = MarginalProblem::new(&task, &h, &model).unwrap();
        assert_eq!(prob.rank(), 3);
        assert_eq!(prob.feasible().rank, 6);
        let g = prob.feasible().point(&DVector::zeros(prob.feasible().free_dim()));
        assert!(prob.value(&g).is_finite());
        assert!(prob.value(&(&g + DVector::from_element(h.m(), 0.1))).is_infinite());
    }
}
