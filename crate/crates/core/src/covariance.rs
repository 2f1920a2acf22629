//! Structured scale matrices: the window scale `Σ_z`, the vectorized
//! offline scale `Σ_d` and the prior scale `Σ_g(g)` of the residual `Δ_H g`.
//!
//! `Σ_g` has a general form valid for any column offsets and a fast form for
//! Page and Hankel matrices that only needs the autocorrelation of `g`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::numerics;
use crate::sigdata::Construction;
use crate::uncertainty::NoiseModel;
use crate::{Error, Result};

/// Largest `nLM` for which `Σ_d` is materialized.
pub const SIGMA_D_CAP: usize = 2000;

/// Clipping threshold for negative eigenvalues of `Σ_g`.
const PSD_CLIP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMethod {
    General,
    FastPageHankel,
}

/// Prior scale `Σ_g(g)` of the trajectory given `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScale {
    pub sigma_g: DMatrix<f64>,
    pub g_norm_sq: f64,
    pub method: ScaleMethod,
}

impl PriorScale {
    /// Clips eigenvalues below `−1e-10·max(1, λ_max)` to zero, logging a
    /// warning. Matrices without such eigenvalues are returned unchanged.
    pub fn enforce_psd(mut self) -> Self {
        if self.sigma_g.is_empty() {
            return self;
        }
        let eig = SymmetricEigen::new(numerics::symmetrize(&self.sigma_g));
        let lmax = eig.eigenvalues.max().max(1.0);
        let lmin = eig.eigenvalues.min();
        if lmin < -PSD_CLIP_TOL * lmax {
            log::warn!("clipping Σ_g eigenvalue {lmin:.3e} to zero");
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            self.sigma_g = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            self.sigma_g = numerics::symmetrize(&self.sigma_g);
        }
        self
    }
}

/// Block-Toeplitz `Σ_z` with `(i, j)` block `Σ_ν(|i−j|)`.
pub fn sigma_z(model: &NoiseModel, l: usize) -> DMatrix<f64> {
    model.window_scale(l)
}

/// `Σ_d = Cov(vec Δ_H)` for windows of length `L` starting at `offsets`.
/// Only intended for verification at small sizes.
pub fn sigma_d(model: &NoiseModel, offsets: &[usize], l: usize) -> Result<DMatrix<f64>> {
    let n = model.n();
    let big_m = offsets.len();
    let size = n * l * big_m;
    if size > SIGMA_D_CAP {
        return Err(Error::SizeCap { size, cap: SIGMA_D_CAP });
    }
    let mut s = DMatrix::zeros(size, size);
    for (i1, &ti) in offsets.iter().enumerate() {
        for i2 in 0..l {
            for (j1, &tj) in offsets.iter().enumerate() {
                for j2 in 0..l {
                    let lag = (ti + i2).abs_diff(tj + j2);
                    if let Some(b) = model.block(lag) {
                        s.view_mut(((i1 * l + i2) * n, (j1 * l + j2) * n), (n, n)).copy_from(b);
                    }
                }
            }
        }
    }
    Ok(s)
}

/// Unnormalized autocorrelation `K(τ) = Σ_k g_k g_{k+τ}` for `τ = 0..M−1`
/// (`K(−τ) = K(τ)`).
pub fn autocorrelation(g: &DVector<f64>) -> Vec<f64> {
    let m = g.len();
    (0..m)
        .map(|tau| (0..m - tau).map(|k| g[k] * g[k + tau]).sum())
        .collect()
}

/// `Σ_g = (gᵀ⊗I) Σ_d (g⊗I)` from a materialized `Σ_d`.
pub fn sigma_g_general(g: &DVector<f64>, sigma_d: &DMatrix<f64>) -> Result<PriorScale> {
    let big_m = g.len();
    if big_m == 0 || !sigma_d.is_square() || sigma_d.nrows() % big_m != 0 {
        return Err(Error::Dimension(format!(
            "Σ_d of size {:?} incompatible with g of length {big_m}",
            sigma_d.shape()
        )));
    }
    let b = sigma_d.nrows() / big_m;
    let mut s = DMatrix::zeros(b, b);
    for k in 0..big_m {
        if g[k] == 0.0 {
            continue;
        }
        for m in 0..big_m {
            let w = g[k] * g[m];
            if w != 0.0 {
                s += sigma_d.view((k * b, m * b), (b, b)) * w;
            }
        }
    }
    Ok(PriorScale {
        sigma_g: numerics::symmetrize(&s),
        g_norm_sq: g.norm_squared(),
        method: ScaleMethod::General,
    })
}

/// Diagonal blocks `T(e) = Σ_τ Σ_ν(|τ·l − e|) K(τ)` for `e = 0..L−1`, with
/// `l` the column stride. `Σ_g` has `(i, j)` block `T(|i−j|)`.
pub fn toeplitz_blocks(k: &[f64], model: &NoiseModel, stride: usize, l: usize) -> Vec<DMatrix<f64>> {
    let n = model.n();
    let t_c = model.decay_horizon() as isize;
    let big_m = k.len() as isize;
    let st = stride as isize;
    (0..l as isize)
        .map(|e| {
            let mut t = DMatrix::zeros(n, n);
            // |τ·l − e| ≤ T_c and |τ| ≤ M − 1
            let lo = (-(big_m - 1)).max(div_ceil(e - t_c, st));
            let hi = (big_m - 1).min((e + t_c).div_euclid(st));
            for tau in lo..=hi {
                let kv = k[tau.unsigned_abs()];
                if kv == 0.0 {
                    continue;
                }
                if let Some(b) = model.block((tau * st - e).unsigned_abs()) {
                    t += b * kv;
                }
            }
            t
        })
        .collect()
}

fn div_ceil(a: isize, b: isize) -> isize {
    -((-a).div_euclid(b))
}

/// Assembles the symmetric block-Toeplitz matrix with `(i, j)` block
/// `blocks[|i−j|]`.
pub fn block_toeplitz(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let l = blocks.len();
    let n = blocks.first().map_or(0, |b| b.nrows());
    let mut s = DMatrix::zeros(n * l, n * l);
    for i in 0..l {
        for j in 0..l {
            s.view_mut((i * n, j * n), (n, n)).copy_from(&blocks[i.abs_diff(j)]);
        }
    }
    s
}

/// Column stride of a Page (`L`) or Hankel (1) signal matrix.
pub fn construction_stride(construction: Construction, l: usize) -> Result<usize> {
    match construction {
        Construction::Page => Ok(l),
        Construction::Hankel => Ok(1),
        Construction::Custom => Err(Error::InvalidArgument(
            "the fast prior scale needs a Page or Hankel signal matrix; use sigma_g_general".into(),
        )),
    }
}

/// `Σ_g(g)` for Page/Hankel matrices from the autocorrelation of `g`,
/// without materializing `Σ_d`.
pub fn sigma_g_fast(g: &DVector<f64>, model: &NoiseModel, construction: Construction, l: usize) -> Result<PriorScale> {
    let stride = construction_stride(construction, l)?;
    if g.is_empty() {
        return Err(Error::InvalidArgument("g must have at least one entry".into()));
    }
    let k = autocorrelation(g);
    let blocks = toeplitz_blocks(&k, model, stride, l);
    Ok(PriorScale {
        sigma_g: block_toeplitz(&blocks),
        g_norm_sq: k[0],
        method: ScaleMethod::FastPageHankel,
    })
}
