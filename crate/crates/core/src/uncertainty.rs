//! Elliptical distributions (Gaussian and Student's t), densities with
//! possibly singular scale matrices, and stationary noise processes.
//!
//! All `Σ` arguments are scale parameters. For Student's t the covariance is
//! `ξ/(ξ−2)·Σ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{self, PsdDecomposition};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Radial density generator of an elliptical family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EllipticalFamily {
    Gaussian,
    StudentT { xi: f64 },
}

impl EllipticalFamily {
    pub fn student_t(xi: f64) -> Result<Self> {
        let f = EllipticalFamily::StudentT { xi };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EllipticalFamily::Gaussian => Ok(()),
            EllipticalFamily::StudentT { xi } if xi > 2.0 && xi.is_finite() => Ok(()),
            EllipticalFamily::StudentT { xi } => Err(Error::InvalidArgument(format!(
                "Student's t degrees of freedom must exceed 2, got {xi}"
            ))),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, EllipticalFamily::Gaussian)
    }

    /// Normalized `log f(x)` in dimension `m`, with `x` the squared
    /// Mahalanobis distance.
    pub fn log_radial(&self, x: f64, m: usize) -> f64 {
        let mf = m as f64;
        match *self {
            EllipticalFamily::Gaussian => -0.5 * mf * LN_2PI - 0.5 * x,
            EllipticalFamily::StudentT { xi } => {
                libm::lgamma(0.5 * (xi + mf)) - libm::lgamma(0.5 * xi)
                    - 0.5 * mf * (xi * std::f64::consts::PI).ln()
                    - 0.5 * (xi + mf) * (x / xi).ln_1p()
            }
        }
    }

    /// `d/dx log f(x)` in dimension `m`.
    pub fn log_radial_slope(&self, x: f64, m: usize) -> f64 {
        match *self {
            EllipticalFamily::Gaussian => -0.5,
            EllipticalFamily::StudentT { xi } => -0.5 * (xi + m as f64) / (xi + x),
        }
    }

    /// Covariance-to-scale ratio (1 for Gaussian, `ξ/(ξ−2)` for t).
    pub fn variance_factor(&self) -> f64 {
        match *self {
            EllipticalFamily::Gaussian => 1.0,
            EllipticalFamily::StudentT { xi } => xi / (xi - 2.0),
        }
    }

    /// Draws `s = 1` (Gaussian) or `1/sqrt(χ²_ξ/ξ)` (t), the radial mixing
    /// factor applied to a standard normal vector.
    fn mixing<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EllipticalFamily::Gaussian => 1.0,
            EllipticalFamily::StudentT { xi } => {
                let chi = ChiSquared::new(xi).expect("validated degrees of freedom");
                let c: f64 = chi.sample(rng);
                (xi / c).sqrt()
            }
        }
    }
}

/// Support tolerance `1e-8·(1+‖x‖)` for singular-scale densities.
pub fn support_tol(x: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + x.norm())
}

/// Log density of `E(mu, sigma)` at `x`, `−∞` off the support of a singular
/// scale. The dimension passed to the generator is the rank of `sigma`.
pub fn log_density(
    family: &EllipticalFamily,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    x: &DVector<f64>,
    tol: f64,
) -> Result<f64> {
    let m = mu.len();
    if x.len() != m || sigma.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "log_density: mu {}, x {}, sigma {:?}",
            m,
            x.len(),
            sigma.shape()
        )));
    }
    let dec = numerics::decompose_psd(sigma, tol)?;
    Ok(log_density_decomposed(family, &dec, &(x - mu), support_tol(x)))
}

/// [`log_density`] for a precomputed decomposition and residual `δ = x − μ`.
pub fn log_density_decomposed(
    family: &EllipticalFamily,
    dec: &PsdDecomposition,
    delta: &DVector<f64>,
    support: f64,
) -> f64 {
    if dec.rank < dec.dim() {
        let off = dec.u2.tr_mul(delta).amax();
        if off > support {
            return f64::NEG_INFINITY;
        }
    }
    -0.5 * dec.log_det() + family.log_radial(dec.inv_quad(delta), dec.rank)
}

/// Sampler for `E(mu, sigma)` with the square-root factor cached.
#[derive(Debug, Clone)]
pub struct EllipticalSampler {
    family: EllipticalFamily,
    mu: DVector<f64>,
    factor: DMatrix<f64>,
}

impl EllipticalSampler {
    pub fn new(family: EllipticalFamily, mu: DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        family.validate()?;
        if sigma.shape() != (mu.len(), mu.len()) {
            return Err(Error::Dimension(format!(
                "sampler: mu {}, sigma {:?}",
                mu.len(),
                sigma.shape()
            )));
        }
        let factor = if numerics::max_abs(sigma) == 0.0 {
            DMatrix::zeros(mu.len(), 0)
        } else {
            numerics::decompose_psd_default(sigma)?.sqrt_factor()
        };
        Ok(Self { family, mu, factor })
    }

    /// `mu + U1 Σ1^{1/2} n · s` with `n` standard normal and `s` the family's
    /// mixing factor.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let r = self.factor.ncols();
        if r == 0 {
            return self.mu.clone();
        }
        let n = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = self.family.mixing(rng);
        &self.mu + &self.factor * n * s
    }
}

/// One draw from `E(mu, sigma)`.
pub fn sample<R: Rng + ?Sized>(
    family: &EllipticalFamily,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(EllipticalSampler::new(*family, mu.clone(), sigma)?.draw(rng))
}

/// Stationary noise `ν_t = col(w_t, v_t)` with block autocovariance
/// `Σ_ν(τ) = blkdiag(Σ_w(τ), Σ_v(τ))`, zero beyond the decay horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    family: EllipticalFamily,
    n_u: usize,
    n_y: usize,
    /// `Σ_ν(τ)` for `τ = 0..=T_c`.
    blocks: Vec<DMatrix<f64>>,
}

impl NoiseModel {
    /// Builds a model from `Σ_w(τ)` and `Σ_v(τ)` for `τ = 0..=T_c` (both lists
    /// must have the same length `T_c + 1`).
    pub fn new(
        family: EllipticalFamily,
        sigma_w: &[DMatrix<f64>],
        sigma_v: &[DMatrix<f64>],
    ) -> Result<Self> {
        family.validate()?;
        if sigma_w.is_empty() || sigma_w.len() != sigma_v.len() {
            return Err(Error::InvalidArgument(format!(
                "Σ_w and Σ_v need the same non-zero number of lags, got {} and {}",
                sigma_w.len(),
                sigma_v.len()
            )));
        }
        let n_u = sigma_w[0].nrows();
        let n_y = sigma_v[0].nrows();
        let n = n_u + n_y;
        let mut blocks = Vec::with_capacity(sigma_w.len());
        for (tau, (w, v)) in sigma_w.iter().zip(sigma_v).enumerate() {
            if w.shape() != (n_u, n_u) || v.shape() != (n_y, n_y) {
                return Err(Error::Dimension(format!(
                    "lag {tau}: Σ_w {:?}, Σ_v {:?}",
                    w.shape(),
                    v.shape()
                )));
            }
            let mut b = DMatrix::zeros(n, n);
            b.view_mut((0, 0), (n_u, n_u)).copy_from(w);
            b.view_mut((n_u, n_u), (n_y, n_y)).copy_from(v);
            let asym = numerics::asymmetry(&b);
            if asym > 1e-10 * numerics::max_abs(&b).max(1.0) {
                return Err(Error::NotSymmetric { asymmetry: asym });
            }
            blocks.push(b);
        }
        // drop trailing zero lags so the horizon is tight
        while blocks.len() > 1 && blocks.last().is_some_and(|b| numerics::max_abs(b) == 0.0) {
            blocks.pop();
        }
        let model = Self { family, n_u, n_y, blocks };
        if !family.is_gaussian() && !model.is_iid() {
            return Err(Error::InvalidArgument(
                "temporally correlated Student's t processes are not supported".into(),
            ));
        }
        numerics::decompose_psd_default(&model.blocks[0])?;
        model.check_window(model.decay_horizon() + 1)?;
        Ok(model)
    }

    /// White noise with `Σ_w(0) = sigma_w`, `Σ_v(0) = sigma_v`.
    pub fn iid(family: EllipticalFamily, sigma_w: DMatrix<f64>, sigma_v: DMatrix<f64>) -> Result<Self> {
        Self::new(family, &[sigma_w], &[sigma_v])
    }

    /// White noise with isotropic scales `sw·I_{n_u}` and `sv·I_{n_y}`.
    pub fn iid_scalar(family: EllipticalFamily, n_u: usize, n_y: usize, sw: f64, sv: f64) -> Result<Self> {
        Self::iid(
            family,
            DMatrix::identity(n_u, n_u) * sw,
            DMatrix::identity(n_y, n_y) * sv,
        )
    }

    /// `Σ(τ) = Σ(0)·ρ^τ` truncated after `horizon` lags. Without an explicit
    /// horizon the smallest `T_c` with `ρ^{T_c+1} < 1e-12` is used.
    pub fn exponential_decay(
        family: EllipticalFamily,
        sigma_w0: DMatrix<f64>,
        sigma_v0: DMatrix<f64>,
        rho: f64,
        horizon: Option<usize>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("decay factor must be in [0, 1), got {rho}")));
        }
        let t_c = match horizon {
            Some(h) => h,
            None => default_horizon(rho),
        };
        let w: Vec<_> = (0..=t_c).map(|t| &sigma_w0 * rho.powi(t as i32)).collect();
        let v: Vec<_> = (0..=t_c).map(|t| &sigma_v0 * rho.powi(t as i32)).collect();
        Self::new(family, &w, &v)
    }

    /// A model with all scales zero.
    pub fn zero(family: EllipticalFamily, n_u: usize, n_y: usize) -> Result<Self> {
        Self::iid(family, DMatrix::zeros(n_u, n_u), DMatrix::zeros(n_y, n_y))
    }

    pub fn family(&self) -> EllipticalFamily {
        self.family
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n(&self) -> usize {
        self.n_u + self.n_y
    }

    /// `T_c`: `Σ_ν(τ) = 0` for `τ > T_c`.
    pub fn decay_horizon(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn is_iid(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| numerics::max_abs(b) == 0.0)
    }

    /// `Σ_ν(τ)`, zero beyond the horizon.
    pub fn sigma_nu(&self, tau: usize) -> DMatrix<f64> {
        self.blocks
            .get(tau)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.n(), self.n()))
    }

    /// Borrowed `Σ_ν(τ)` for `τ ≤ T_c`.
    pub fn block(&self, tau: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(tau)
    }

    pub fn sigma_w(&self, tau: usize) -> DMatrix<f64> {
        self.sigma_nu(tau).view((0, 0), (self.n_u, self.n_u)).into_owned()
    }

    pub fn sigma_v(&self, tau: usize) -> DMatrix<f64> {
        self.sigma_nu(tau).view((self.n_u, self.n_u), (self.n_y, self.n_y)).into_owned()
    }

    /// Block-Toeplitz `nL×nL` scale of `L` consecutive samples.
    pub fn window_scale(&self, len: usize) -> DMatrix<f64> {
        let n = self.n();
        let mut s = DMatrix::zeros(n * len, n * len);
        for i in 0..len {
            for j in 0..len {
                if let Some(b) = self.block(i.abs_diff(j)) {
                    s.view_mut((i * n, j * n), (n, n)).copy_from(b);
                }
            }
        }
        s
    }

    /// Checks that the stacked scale of a window of length `len` is PSD.
    pub fn check_window(&self, len: usize) -> Result<()> {
        if self.is_iid() {
            return Ok(());
        }
        numerics::decompose_psd_default(&self.window_scale(len)).map(|_| ())
    }
}

fn default_horizon(rho: f64) -> usize {
    if rho == 0.0 {
        return 0;
    }
    let mut t = 0usize;
    let mut p = rho;
    while p >= 1e-12 {
        p *= rho;
        t += 1;
    }
    t
}

/// Draws `ν_1..ν_len` from the process. White noise is drawn step by step
/// (independent mixing variables for t); correlated Gaussian noise is drawn
/// jointly from the stacked window scale.
pub fn sample_stationary_process<R: Rng + ?Sized>(
    model: &NoiseModel,
    len: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let n = model.n();
    if model.is_zero() {
        return Ok(vec![DVector::zeros(n); len]);
    }
    if model.is_iid() {
        let s = EllipticalSampler::new(model.family, DVector::zeros(n), &model.blocks[0])?;
        return Ok((0..len).map(|_| s.draw(rng)).collect());
    }
    let s = EllipticalSampler::new(model.family, DVector::zeros(n * len), &model.window_scale(len))?;
    let joint = s.draw(rng);
    Ok((0..len).map(|t| joint.rows(t * n, n).into_owned()).collect())
}
