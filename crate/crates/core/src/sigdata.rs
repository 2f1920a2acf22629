//! Trajectories, signal matrices and data-richness checks.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numerics;
use crate::{Error, Result};

/// Default relative singular-value cutoff for rank checks on data.
pub const DATA_RANK_RTOL: f64 = 1e-8;

/// Input-output samples `z_t = col(u_t, y_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension(format!(
                "input length {} differs from output length {}",
                u.len(),
                y.len()
            )));
        }
        if let (Some(u0), Some(y0)) = (u.first(), y.first()) {
            let (n_u, n_y) = (u0.len(), y0.len());
            if u.iter().any(|v| v.len() != n_u) || y.iter().any(|v| v.len() != n_y) {
                return Err(Error::Dimension("ragged trajectory samples".into()));
            }
        }
        Ok(Self { u, y })
    }

    /// Splits a stacked vector `col(z_1, …, z_L)`.
    pub fn from_stacked(z: &DVector<f64>, n_u: usize, n_y: usize) -> Result<Self> {
        let n = n_u + n_y;
        if n == 0 || z.len() % n != 0 {
            return Err(Error::Dimension(format!("stacked length {} not a multiple of {n}", z.len())));
        }
        let len = z.len() / n;
        let u = (0..len).map(|t| z.rows(t * n, n_u).into_owned()).collect();
        let y = (0..len).map(|t| z.rows(t * n + n_u, n_y).into_owned()).collect();
        Ok(Self { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    pub fn n_y(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    pub fn n(&self) -> usize {
        self.n_u() + self.n_y()
    }

    /// `z_t` (0-based).
    pub fn z(&self, t: usize) -> DVector<f64> {
        let mut z = DVector::zeros(self.n());
        z.rows_mut(0, self.n_u()).copy_from(&self.u[t]);
        z.rows_mut(self.n_u(), self.n_y()).copy_from(&self.y[t]);
        z
    }

    /// `col(z_start, …, z_{start+len−1})`.
    pub fn stacked_window(&self, start: usize, len: usize) -> Result<DVector<f64>> {
        if start + len > self.len() {
            return Err(Error::TooShort { needed: start + len, have: self.len() });
        }
        let n = self.n();
        let mut out = DVector::zeros(n * len);
        for k in 0..len {
            out.rows_mut(k * n, n).copy_from(&self.z(start + k));
        }
        Ok(out)
    }

    pub fn stacked(&self) -> DVector<f64> {
        self.stacked_window(0, self.len()).expect("full window")
    }

    /// Samples `start..start+len` as a new trajectory.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::TooShort { needed: start + len, have: self.len() });
        }
        Ok(Self {
            u: self.u[start..start + len].to_vec(),
            y: self.y[start..start + len].to_vec(),
        })
    }

    /// CSV with header `t,u_1..u_{n_u},y_1..y_{n_y}` and `t` counted from 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u_{i}")));
        header.extend((1..=self.n_y()).map(|i| format!("y_{i}")));
        wr.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(self.u[t].iter().chain(self.y[t].iter()).map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::InvalidArgument("trajectory CSV must start with a `t` column".into()));
        }
        let n_u = header.iter().filter(|h| h.starts_with("u_")).count();
        let n_y = header.iter().filter(|h| h.starts_with("y_")).count();
        if n_u + n_y + 1 != header.len() {
            return Err(Error::InvalidArgument(format!("unexpected trajectory CSV header {header:?}")));
        }
        let (mut u, mut y) = (Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad number in trajectory CSV: {e}")))?;
            u.push(DVector::from_column_slice(&vals[..n_u]));
            y.push(DVector::from_column_slice(&vals[n_u..]));
        }
        Self::new(u, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Page,
    Hankel,
    Custom,
}

/// Column-stacked length-`L` windows `H = [col(z_{t_i}, …, z_{t_i+L−1})]_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub h: DMatrix<f64>,
    pub construction: Construction,
    /// 0-based start index of every column.
    pub offsets: Vec<usize>,
    pub l: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl SignalMatrix {
    pub fn m(&self) -> usize {
        self.h.ncols()
    }

    pub fn n(&self) -> usize {
        self.n_u + self.n_y
    }

    /// Offset stride between consecutive columns (`L` for Page, 1 for
    /// Hankel); `None` for custom offsets.
    pub fn stride(&self) -> Option<usize> {
        match self.construction {
            Construction::Page => Some(self.l),
            Construction::Hankel => Some(1),
            Construction::Custom => None,
        }
    }

    /// Windows starting at arbitrary offsets.
    pub fn from_offsets(traj: &Trajectory, l: usize, offsets: Vec<usize>) -> Result<Self> {
        Self::assemble(traj, l, offsets, Construction::Custom)
    }

    fn assemble(traj: &Trajectory, l: usize, offsets: Vec<usize>, construction: Construction) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument("window length L must be at least 1".into()));
        }
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("a signal matrix needs at least one column".into()));
        }
        let n = traj.n();
        let mut h = DMatrix::zeros(n * l, offsets.len());
        for (i, &t) in offsets.iter().enumerate() {
            h.set_column(i, &traj.stacked_window(t, l)?);
        }
        Ok(Self { h, construction, offsets, l, n_u: traj.n_u(), n_y: traj.n_y() })
    }
}

/// Page (`M = ⌊N/L⌋` disjoint windows) or Hankel (`M = N−L+1` unit-shifted
/// windows) signal matrix.
pub fn build_signal_matrix(traj: &Trajectory, l: usize, construction: Construction) -> Result<SignalMatrix> {
    let big_n = traj.len();
    if l == 0 {
        return Err(Error::InvalidArgument("window length L must be at least 1".into()));
    }
    if big_n < l {
        return Err(Error::TooShort { needed: l, have: big_n });
    }
    let offsets: Vec<usize> = match construction {
        Construction::Hankel => (0..=big_n - l).collect(),
        Construction::Page => (0..big_n / l).map(|i| i * l).collect(),
        Construction::Custom => {
            return Err(Error::InvalidArgument("custom signal matrices need explicit offsets".into()))
        }
    };
    SignalMatrix::assemble(traj, l, offsets, construction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IdentifiabilityReport {
    pub rank_h0: usize,
    pub rank_phi_h0: usize,
    /// `n_u·L + n_x`.
    pub required: usize,
    pub satisfied: bool,
}

/// Rank condition `rank H⁰ = rank ΦH⁰ = n_u L + n_x` on noise-free data.
pub fn check_identifiability(h0: &SignalMatrix, phi: &DMatrix<f64>, n_x: usize, tol: f64) -> Result<IdentifiabilityReport> {
    if phi.ncols() != h0.h.nrows() {
        return Err(Error::Dimension(format!(
            "Φ has {} columns, H has {} rows",
            phi.ncols(),
            h0.h.nrows()
        )));
    }
    let rank_h0 = numerics::numerical_rank(&h0.h, tol);
    let rank_phi_h0 = numerics::numerical_rank(&(phi * &h0.h), tol);
    let required = h0.n_u * h0.l + n_x;
    Ok(IdentifiabilityReport {
        rank_h0,
        rank_phi_h0,
        required,
        satisfied: rank_h0 == required && rank_phi_h0 == required,
    })
}

/// Mosaic-Hankel matrix of depth `order` over one or more input sequences.
pub fn mosaic_hankel(inputs: &[Vec<DVector<f64>>], order: usize) -> Result<DMatrix<f64>> {
    if order == 0 {
        return Err(Error::InvalidArgument("excitation order must be at least 1".into()));
    }
    let n_u = inputs
        .first()
        .and_then(|s| s.first())
        .map(|v| v.len())
        .ok_or_else(|| Error::InvalidArgument("no input samples".into()))?;
    let mut cols = 0;
    for s in inputs {
        if s.len() < order {
            return Err(Error::TooShort { needed: order, have: s.len() });
        }
        cols += s.len() - order + 1;
    }
    let mut h = DMatrix::zeros(n_u * order, cols);
    let mut c = 0;
    for s in inputs {
        for start in 0..=s.len() - order {
            for k in 0..order {
                h.view_mut((k * n_u, c), (n_u, 1)).copy_from(&s[start + k]);
            }
            c += 1;
        }
    }
    Ok(h)
}

/// Collective persistency of excitation of the given order: full row rank of
/// the mosaic-Hankel matrix.
pub fn check_persistent_excitation(inputs: &[Vec<DVector<f64>>], order: usize) -> Result<bool> {
    let h = mosaic_hankel(inputs, order)?;
    Ok(numerics::numerical_rank(&h, DATA_RANK_RTOL) == h.nrows())
}
