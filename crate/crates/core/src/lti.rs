//! Discrete-time LTI state-space systems.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::numerics::{self, solve_discrete_lyapunov, spectral_radius};
use crate::{Error, Result};

/// Relative cutoff for controllability/observability rank tests.
const STRUCTURE_RTOL: f64 = 1e-12;

const MAX_GENERATION_ATTEMPTS: usize = 100;

/// `x_{t+1} = A x_t + B u_t`, `y_t = C x_t + D u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        if n_x == 0 || !a.is_square() {
            return Err(Error::Dimension(format!("A must be square and non-empty, got {:?}", a.shape())));
        }
        let n_u = b.ncols();
        let n_y = c.nrows();
        if b.nrows() != n_x || c.ncols() != n_x || d.shape() != (n_y, n_u) || n_u == 0 || n_y == 0 {
            return Err(Error::Dimension(format!(
                "inconsistent realization: A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Noise-free outputs for the given inputs from initial state `x0`.
    pub fn simulate(&self, inputs: &[DVector<f64>], x0: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.simulate_states(inputs, x0).map(|(y, _)| y)
    }

    /// Outputs `y_1..y_N` and states `x_1..x_{N+1}` (the last entry is the
    /// state after the final input).
    pub fn simulate_states(
        &self,
        inputs: &[DVector<f64>],
        x0: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("at least one input sample is required".into()));
        }
        if x0.len() != self.n_x() {
            return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), self.n_x())));
        }
        let mut x = x0.clone();
        let mut ys = Vec::with_capacity(inputs.len());
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        for (t, u) in inputs.iter().enumerate() {
            if u.len() != self.n_u() {
                return Err(Error::Dimension(format!(
                    "input {t} has length {}, expected {}",
                    u.len(),
                    self.n_u()
                )));
            }
            xs.push(x.clone());
            ys.push(&self.c * &x + &self.d * u);
            x = &self.a * &x + &self.b * u;
        }
        xs.push(x);
        Ok((ys, xs))
    }

    pub fn h2_norm(&self) -> Result<f64> {
        let p = solve_discrete_lyapunov(&self.a, &(&self.b * self.b.transpose()))?;
        let val = (&self.c * p * self.c.transpose()).trace() + (&self.d * self.d.transpose()).trace();
        Ok(val.max(0.0).sqrt())
    }

    /// Rescales `C` and `D` so the H2 norm is one.
    pub fn normalize_h2(&self) -> Result<Self> {
        let h2 = self.h2_norm()?;
        if !(h2 > 0.0) {
            return Err(Error::InvalidArgument("cannot normalize a system with zero H2 norm".into()));
        }
        Ok(Self {
            a: self.a.clone(),
            b: self.b.clone(),
            c: &self.c / h2,
            d: &self.d / h2,
        })
    }

    /// `col(C, CA, …, CA^{l−1})`.
    pub fn observability_matrix(&self, l: usize) -> DMatrix<f64> {
        let (n_x, n_y) = (self.n_x(), self.n_y());
        let mut o = DMatrix::zeros(n_y * l, n_x);
        let mut block = self.c.clone();
        for k in 0..l {
            o.view_mut((k * n_y, 0), (n_y, n_x)).copy_from(&block);
            block = &block * &self.a;
        }
        o
    }

    /// `[B, AB, …, A^{n_x−1}B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let mut k = DMatrix::zeros(n_x, n_u * n_x);
        let mut block = self.b.clone();
        for i in 0..n_x {
            k.view_mut((0, i * n_u), (n_x, n_u)).copy_from(&block);
            block = &self.a * &block;
        }
        k
    }

    pub fn is_controllable(&self) -> bool {
        numerics::numerical_rank(&self.controllability_matrix(), STRUCTURE_RTOL) == self.n_x()
    }

    pub fn is_observable(&self) -> bool {
        numerics::numerical_rank(&self.observability_matrix(self.n_x()), STRUCTURE_RTOL) == self.n_x()
    }

    /// Smallest `l` for which the `l`-block observability matrix has rank `n_x`.
    pub fn lag(&self) -> Result<usize> {
        let n_x = self.n_x();
        let mut rank = 0;
        for l in 1..=n_x {
            rank = numerics::numerical_rank(&self.observability_matrix(l), STRUCTURE_RTOL);
            if rank == n_x {
                return Ok(l);
            }
        }
        Err(Error::Unobservable { rank, n_x })
    }

    /// `C (I − A)⁻¹ B + D`.
    pub fn dc_gain(&self) -> Result<DMatrix<f64>> {
        let n_x = self.n_x();
        let m = DMatrix::<f64>::identity(n_x, n_x) - &self.a;
        let lu = m.clone().full_piv_lu();
        let diag = lu.u().diagonal();
        let dmax = diag.amax();
        let dmin = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if !(dmax > 0.0) || dmin / dmax < 1e-13 {
            return Err(Error::Singular("I − A (eigenvalue at 1)".into()));
        }
        let x = lu.solve(&self.b).ok_or_else(|| Error::Singular("I − A".into()))?;
        Ok(&self.c * x + &self.d)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct SystemDoc {
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    D: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> std::result::Result<DMatrix<f64>, String> {
    let nr = rows.len();
    let nc = rows.first().map_or(ncols_if_empty, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_row_iterator(nr, nc, rows.iter().flatten().copied()))
}

impl Serialize for LtiSystem {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SystemDoc {
            A: to_rows(&self.a),
            B: to_rows(&self.b),
            C: to_rows(&self.c),
            D: to_rows(&self.d),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LtiSystem {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = SystemDoc::deserialize(de)?;
        let a = from_rows(&doc.A, 0).map_err(D::Error::custom)?;
        let b = from_rows(&doc.B, 0).map_err(D::Error::custom)?;
        let c = from_rows(&doc.C, a.nrows()).map_err(D::Error::custom)?;
        let d = from_rows(&doc.D, b.ncols()).map_err(D::Error::custom)?;
        LtiSystem::new(a, b, c, d).map_err(D::Error::custom)
    }
}

/// Options for [`random_system_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSystemOptions {
    /// Draw a Gaussian feedthrough `D` instead of `D = 0`.
    pub nonzero_d: bool,
    /// Range of the spectral radius of `A`.
    pub radius_range: (f64, f64),
}

impl Default for RandomSystemOptions {
    fn default() -> Self {
        Self { nonzero_d: false, radius_range: (0.3, 0.95) }
    }
}

/// Random stable, controllable and observable system with unit H2 norm.
///
/// `A` is a dense Gaussian matrix rescaled to a spectral radius drawn
/// uniformly from `[0.3, 0.95]`; `B` and `C` are standard Gaussian and
/// `D = 0`.
pub fn random_system<R: Rng + ?Sized>(n_x: usize, n_u: usize, n_y: usize, rng: &mut R) -> Result<LtiSystem> {
    random_system_with(n_x, n_u, n_y, RandomSystemOptions::default(), rng)
}

pub fn random_system_with<R: Rng + ?Sized>(
    n_x: usize,
    n_u: usize,
    n_y: usize,
    opts: RandomSystemOptions,
    rng: &mut R,
) -> Result<LtiSystem> {
    if n_x == 0 || n_u == 0 || n_y == 0 {
        return Err(Error::InvalidArgument("system dimensions must be at least 1".into()));
    }
    let (lo, hi) = opts.radius_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid radius range {:?}", opts.radius_range)));
    }
    let gauss = |r: usize, c: usize, rng: &mut R| -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let g = gauss(n_x, n_x, rng);
        let rho = spectral_radius(&g);
        let target = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let b = gauss(n_x, n_u, rng);
        let c = gauss(n_y, n_x, rng);
        let d = if opts.nonzero_d { gauss(n_y, n_u, rng) } else { DMatrix::zeros(n_y, n_u) };
        if !(rho > 1e-8) {
            continue;
        }
        let sys = LtiSystem::new(g * (target / rho), b, c, d)?;
        if !sys.is_controllable() || !sys.is_observable() {
            continue;
        }
        return sys.normalize_h2();
    }
    Err(Error::GenerationFailed(MAX_GENERATION_ATTEMPTS))
}

/// Ten-state discretized 1-D diffusion chain actuated and measured at the
/// first cell.
pub fn make_diffusion_system(alpha: f64, beta: f64) -> Result<LtiSystem> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "diffusion parameters must lie in (0, 1), got alpha={alpha}, beta={beta}"
        )));
    }
    const N: usize = 10;
    let mut a = DMatrix::zeros(N, N);
    for i in 0..N {
        let neighbours = if i == 0 || i == N - 1 { 1.0 } else { 2.0 };
        a[(i, i)] = 1.0 - beta - neighbours * alpha;
        if i > 0 {
            a[(i, i - 1)] = alpha;
        }
        if i + 1 < N {
            a[(i, i + 1)] = alpha;
        }
    }
    let mut b = DMatrix::zeros(N, 1);
    b[(0, 0)] = 1.0;
    let mut c = DMatrix::zeros(1, N);
    c[(0, 0)] = 1.0;
    LtiSystem::new(a, b, c, DMatrix::zeros(1, 1))
}
