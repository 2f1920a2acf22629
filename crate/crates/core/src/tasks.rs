//! Smoothing, prediction and control written as observations
//! `ζ = Φ z⁰ + ε` of a stacked length-`L` trajectory `z⁰`.
//!
//! Entry `c` of `z_t` (0-based, inputs first) sits at index `t·n + c`.
//! Every `Φ` built here selects entries of `z⁰`, so a task also carries the
//! selected index of every row.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::sigma_z;
use crate::numerics;
use crate::sigdata::Trajectory;
use crate::uncertainty::{EllipticalFamily, NoiseModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Smoothing,
    Prediction,
    Control,
}

/// What an observation row carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTag {
    /// Noisy measurement of a past (or, for smoothing, any) sample.
    Measured,
    /// A future input that is given (prediction).
    KnownInput,
    /// A design target `ζ^ctr` for a future sample (control).
    Design,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub phi: DMatrix<f64>,
    pub zeta: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub family: EllipticalFamily,
    /// Index into `z⁰` selected by each row of `Φ`.
    pub rows: Vec<usize>,
    pub tags: Vec<RowTag>,
    pub l: usize,
    pub l0: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl TaskSpec {
    pub fn n(&self) -> usize {
        self.n_u + self.n_y
    }

    pub fn p(&self) -> usize {
        self.zeta.len()
    }

    /// `nL`.
    pub fn dim(&self) -> usize {
        self.n() * self.l
    }

    /// `L′ = L − L₀`.
    pub fn horizon(&self) -> usize {
        self.l - self.l0
    }

    pub fn z_index(&self, t: usize, channel: usize) -> usize {
        t * self.n() + channel
    }

    /// `Φ z` through the row selection.
    pub fn observe(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&i| z[i]))
    }

    /// `Φ A` through the row selection.
    pub fn observe_rows(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), a.ncols());
        for (r, &i) in self.rows.iter().enumerate() {
            out.set_row(r, &a.row(i));
        }
        out
    }

    /// `Φ S Φᵀ` through the row selection.
    pub fn observe_sym(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.rows.len();
        DMatrix::from_fn(p, p, |a, b| s[(self.rows[a], self.rows[b])])
    }

    /// Indices of inputs (`c < n_u`) or outputs at times `t0..t1`.
    pub fn indices(&self, inputs: bool, t0: usize, t1: usize) -> Vec<usize> {
        let (c0, c1) = if inputs { (0, self.n_u) } else { (self.n_u, self.n()) };
        (t0..t1)
            .flat_map(|t| (c0..c1).map(move |c| (t, c)))
            .map(|(t, c)| self.z_index(t, c))
            .collect()
    }

    /// Future inputs of a stacked trajectory (the actuation plan for control).
    pub fn future_inputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (self.l0..self.l)
            .map(|t| z.rows(self.z_index(t, 0), self.n_u).into_owned())
            .collect()
    }

    /// Future outputs of a stacked trajectory.
    pub fn future_outputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (self.l0..self.l)
            .map(|t| z.rows(self.z_index(t, self.n_u), self.n_y).into_owned())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let p = self.zeta.len();
        if self.phi.shape() != (p, self.dim())
            || self.sigma_eps.shape() != (p, p)
            || self.rows.len() != p
            || self.tags.len() != p
        {
            return Err(Error::Dimension("inconsistent task encoding".into()));
        }
        Ok(())
    }
}

fn selection(rows: &[usize], dim: usize) -> DMatrix<f64> {
    let mut phi = DMatrix::zeros(rows.len(), dim);
    for (r, &i) in rows.iter().enumerate() {
        phi[(r, i)] = 1.0;
    }
    phi
}

fn check_model(model: &NoiseModel, traj: &Trajectory) -> Result<()> {
    if model.n_u() != traj.n_u() || model.n_y() != traj.n_y() {
        return Err(Error::Dimension(format!(
            "noise model is for (n_u, n_y) = ({}, {}), trajectory has ({}, {})",
            model.n_u(),
            model.n_y(),
            traj.n_u(),
            traj.n_y()
        )));
    }
    Ok(())
}

/// T1: the whole window is measured, `Φ = I`, `Σ_ε = Σ_z`.
pub fn build_smoothing(measured: &Trajectory, model: &NoiseModel) -> Result<TaskSpec> {
    check_model(model, measured)?;
    let l = measured.len();
    if l == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let dim = measured.n() * l;
    let rows: Vec<usize> = (0..dim).collect();
    let task = TaskSpec {
        kind: TaskKind::Smoothing,
        phi: DMatrix::identity(dim, dim),
        zeta: measured.stacked(),
        sigma_eps: sigma_z(model, l),
        family: model.family(),
        tags: vec![RowTag::Measured; dim],
        rows,
        l,
        l0: l,
        n_u: measured.n_u(),
        n_y: measured.n_y(),
    };
    task.validate()?;
    Ok(task)
}

fn check_lag(l0: usize, lag: usize) -> Result<()> {
    if l0 < lag {
        return Err(Error::InvalidArgument(format!(
            "initial window L0 = {l0} is shorter than the system lag {lag}"
        )));
    }
    Ok(())
}

/// T2: past window of length `L₀` and all future inputs are observed;
/// `Σ_ε = Φ Σ_z Φᵀ`.
pub fn build_prediction(
    initial: &Trajectory,
    future_inputs: &[DVector<f64>],
    model: &NoiseModel,
    lag: usize,
) -> Result<TaskSpec> {
    check_model(model, initial)?;
    let l0 = initial.len();
    check_lag(l0, lag)?;
    let (n_u, n_y) = (initial.n_u(), initial.n_y());
    if future_inputs.iter().any(|u| u.len() != n_u) {
        return Err(Error::Dimension("future input of wrong size".into()));
    }
    let n = n_u + n_y;
    let l = l0 + future_inputs.len();
    let mut rows: Vec<usize> = (0..n * l0).collect();
    let mut tags = vec![RowTag::Measured; n * l0];
    let mut zeta: Vec<f64> = initial.stacked().iter().copied().collect();
    for (k, u) in future_inputs.iter().enumerate() {
        for c in 0..n_u {
            rows.push((l0 + k) * n + c);
            tags.push(RowTag::KnownInput);
            zeta.push(u[c]);
        }
    }
    let sz = sigma_z(model, l);
    let sigma_eps = DMatrix::from_fn(rows.len(), rows.len(), |a, b| sz[(rows[a], rows[b])]);
    let task = TaskSpec {
        kind: TaskKind::Prediction,
        phi: selection(&rows, n * l),
        zeta: DVector::from_vec(zeta),
        sigma_eps,
        family: model.family(),
        rows,
        tags,
        l,
        l0,
        n_u,
        n_y,
    };
    task.validate()?;
    Ok(task)
}

/// Quadratic tracking objective over the future window `t = L₀+1..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlObjective {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_ref: Vec<DVector<f64>>,
    pub y_ref: Vec<DVector<f64>>,
}

impl ControlObjective {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, u_ref: Vec<DVector<f64>>, y_ref: Vec<DVector<f64>>) -> Result<Self> {
        if u_ref.len() != y_ref.len() || u_ref.is_empty() {
            return Err(Error::Dimension(format!(
                "reference lengths {} and {} must be equal and non-zero",
                u_ref.len(),
                y_ref.len()
            )));
        }
        if u_ref.iter().any(|u| u.len() != r.nrows()) || y_ref.iter().any(|y| y.len() != q.nrows()) {
            return Err(Error::Dimension("reference sizes do not match Q and R".into()));
        }
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !m.is_square() || numerics::asymmetry(m) > 1e-12 * numerics::max_abs(m).max(1.0) || m.clone().cholesky().is_none() {
                return Err(Error::InvalidArgument(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(Self { q, r, u_ref, y_ref })
    }

    /// Scalar weights `Q = q·I`, `R = r·I` with constant-in-time expansion of
    /// per-step references.
    pub fn scalar(q: f64, r: f64, u_ref: Vec<DVector<f64>>, y_ref: Vec<DVector<f64>>) -> Result<Self> {
        let n_u = u_ref.first().map_or(0, |u| u.len());
        let n_y = y_ref.first().map_or(0, |y| y.len());
        Self::new(DMatrix::identity(n_y, n_y) * q, DMatrix::identity(n_u, n_u) * r, u_ref, y_ref)
    }

    /// Scales `Q` and `R` by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(&self.q * s, &self.r * s, self.u_ref.clone(), self.y_ref.clone())
    }

    pub fn horizon(&self) -> usize {
        self.u_ref.len()
    }
}

/// T3: past window measured, future samples tied to the references with
/// scale `blkdiag(R⁻¹, Q⁻¹)`; `Φ = I`.
pub fn build_control(
    initial: &Trajectory,
    objective: &ControlObjective,
    model: &NoiseModel,
    lag: usize,
) -> Result<TaskSpec> {
    check_model(model, initial)?;
    let l0 = initial.len();
    check_lag(l0, lag)?;
    let (n_u, n_y) = (initial.n_u(), initial.n_y());
    if objective.r.nrows() != n_u || objective.q.nrows() != n_y {
        return Err(Error::Dimension("Q/R sizes do not match the trajectory".into()));
    }
    let n = n_u + n_y;
    let lp = objective.horizon();
    let l = l0 + lp;
    let dim = n * l;
    let rinv = numerics::spd_inverse(&objective.r)?;
    let qinv = numerics::spd_inverse(&objective.q)?;
    let mut sigma_eps = DMatrix::zeros(dim, dim);
    sigma_eps.view_mut((0, 0), (n * l0, n * l0)).copy_from(&sigma_z(model, l0));
    let mut zeta = DVector::zeros(dim);
    zeta.rows_mut(0, n * l0).copy_from(&initial.stacked());
    for k in 0..lp {
        let base = (l0 + k) * n;
        sigma_eps.view_mut((base, base), (n_u, n_u)).copy_from(&rinv);
        sigma_eps.view_mut((base + n_u, base + n_u), (n_y, n_y)).copy_from(&qinv);
        zeta.rows_mut(base, n_u).copy_from(&objective.u_ref[k]);
        zeta.rows_mut(base + n_u, n_y).copy_from(&objective.y_ref[k]);
    }
    let mut tags = vec![RowTag::Measured; n * l0];
    tags.extend(std::iter::repeat_n(RowTag::Design, n * lp));
    let task = TaskSpec {
        kind: TaskKind::Control,
        phi: DMatrix::identity(dim, dim),
        zeta,
        sigma_eps,
        family: model.family(),
        rows: (0..dim).collect(),
        tags,
        l,
        l0,
        n_u,
        n_y,
    };
    task.validate()?;
    Ok(task)
}

/// Normalized root control cost
/// `sqrt((1/L′) Σ_t (‖u_t − u^ref_t‖²_R + ‖y_t − y^ref_t‖²_Q) / q̄)` with
/// `q̄ = tr(Q)/n_y`; for scalar weights the summand is
/// `(R/Q)‖u_t − u^ref_t‖² + ‖y_t − y^ref_t‖²`.
pub fn control_cost(z: &DVector<f64>, objective: &ControlObjective, l0: usize) -> Result<f64> {
    let n_u = objective.r.nrows();
    let n_y = objective.q.nrows();
    let n = n_u + n_y;
    let lp = objective.horizon();
    if z.len() != n * (l0 + lp) {
        return Err(Error::Dimension(format!(
            "trajectory length {} does not match n(L0 + L') = {}",
            z.len(),
            n * (l0 + lp)
        )));
    }
    let qbar = objective.q.trace() / n_y as f64;
    let mut total = 0.0;
    for k in 0..lp {
        let base = (l0 + k) * n;
        let du = z.rows(base, n_u) - &objective.u_ref[k];
        let dy = z.rows(base + n_u, n_y) - &objective.y_ref[k];
        total += (du.dot(&(&objective.r * &du)) + dy.dot(&(&objective.q * &dy))) / qbar;
    }
    Ok((total / lp as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: EllipticalFamily = EllipticalFamily::Gaussian;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_traj(rng: &mut ChaCha8Rng, len: usize, n_u: usize, n_y: usize) -> Trajectory {
        let f = |rng: &mut ChaCha8Rng, d: usize| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        Trajectory::new((0..len).map(|_| f(rng, n_u)).collect(), (0..len).map(|_| f(rng, n_y)).collect()).unwrap()
    }

    fn decay_model() -> NoiseModel {
        NoiseModel::exponential_decay(G, scalar(0.0), scalar(1e-2), 0.9, None).unwrap()
    }

    #[test]
    fn smoothing_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_traj(&mut rng, 40, 1, 1);
        let iid = NoiseModel::iid_scalar(G, 1, 1, 1e-2, 1e-2).unwrap();
        let t = build_smoothing(&traj, &iid).unwrap();
        assert_eq!(t.p(), 80);
        assert_eq!(t.zeta, traj.stacked());
        assert_eq!(t.sigma_eps, DMatrix::identity(80, 80) * 1e-2);
        assert_eq!(t.phi, DMatrix::identity(80, 80));
        let wrong = NoiseModel::iid_scalar(G, 2, 1, 1.0, 1.0).unwrap();
        assert!(build_smoothing(&traj, &wrong).is_err());
    }

    #[test]
    fn prediction_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_traj(&mut rng, 40, 1, 1);
        let init = traj.slice(0, 10).unwrap();
        let fut = traj.u[10..].to_vec();
        let model = NoiseModel::iid_scalar(G, 1, 1, 0.0, 1e-2).unwrap();
        let t = build_prediction(&init, &fut, &model, 3).unwrap();
        assert_eq!(t.p(), 50);
        // future-input rows have zero scale
        for r in 20..50 {
            assert_eq!(t.tags[r], RowTag::KnownInput);
            assert!(t.sigma_eps.row(r).iter().all(|v| *v == 0.0));
        }
        let z0 = traj.stacked();
        let mut expect: Vec<f64> = z0.rows(0, 20).iter().copied().collect();
        expect.extend(fut.iter().map(|u| u[0]));
        assert_eq!(t.observe(&z0).as_slice(), expect.as_slice());
        assert_eq!(&t.phi * &z0, t.observe(&z0));
        assert!(build_prediction(&init, &fut, &model, 11).is_err());
    }

    #[test]
    fn selection_recovers_entries_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = decay_model();
        for _ in 0..100 {
            let traj = random_traj(&mut rng, 12, 1, 1);
            let t = build_prediction(&traj.slice(0, 5).unwrap(), &traj.u[5..], &model, 1).unwrap();
            let z0 = DVector::from_fn(t.dim(), |_, _| rng.random_range(-1.0..1.0));
            assert_eq!(&t.phi * &z0, t.observe(&z0));
            let sz = sigma_z(&model, t.l);
            assert_eq!(t.sigma_eps, &t.phi * &sz * t.phi.transpose());
        }
        let traj = random_traj(&mut rng, 12, 1, 1);
        let s = build_smoothing(&traj, &model).unwrap();
        assert_eq!(s.sigma_eps, &s.phi * sigma_z(&model, 12) * s.phi.transpose());
    }

    #[test]
    fn prediction_without_future_is_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = random_traj(&mut rng, 8, 2, 1);
        let model = NoiseModel::iid_scalar(G, 2, 1, 0.1, 0.2).unwrap();
        let p = build_prediction(&traj, &[], &model, 1).unwrap();
        let s = build_smoothing(&traj, &model).unwrap();
        assert_eq!((p.phi, p.zeta, p.sigma_eps, p.rows), (s.phi, s.zeta, s.sigma_eps, s.rows));
    }

    fn step_references(dc: f64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let y: Vec<DVector<f64>> = (0..30)
            .map(|k| DVector::from_element(1, if (10..20).contains(&k) { -1.0 } else { 1.0 }))
            .collect();
        let u = y.iter().map(|v| v / dc).collect();
        (u, y)
    }

    #[test]
    fn control_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = random_traj(&mut rng, 10, 1, 1);
        let (u_ref, y_ref) = step_references(2.0);
        let obj = ControlObjective::scalar(5.0, 0.5, u_ref, y_ref).unwrap();
        let model = decay_model();
        let t = build_control(&init, &obj, &model, 10).unwrap();
        assert_eq!(t.p(), 80);
        for k in 0..30 {
            let b = 20 + 2 * k;
            assert_abs_diff_eq!(t.sigma_eps[(b, b)], 2.0, epsilon = 1e-15);
            assert_abs_diff_eq!(t.sigma_eps[(b + 1, b + 1)], 0.2, epsilon = 1e-15);
            let sign = if (10..20).contains(&k) { -1.0 } else { 1.0 };
            assert_eq!(t.zeta[b + 1], sign);
            assert_eq!(t.zeta[b], sign / 2.0);
            assert_eq!(t.tags[b], RowTag::Design);
        }
        assert_eq!(t.sigma_eps.view((0, 0), (20, 20)).into_owned(), sigma_z(&model, 10));
        assert_eq!(numerics::max_abs(&t.sigma_eps.view((0, 20), (20, 60)).into_owned()), 0.0);

        let scaled = build_control(&init, &obj.scaled(4.0).unwrap(), &model, 10).unwrap();
        let tail = t.sigma_eps.view((20, 20), (60, 60)).into_owned();
        let stail = scaled.sigma_eps.view((20, 20), (60, 60)).into_owned();
        assert!(numerics::max_abs(&(stail * 4.0 - tail)) <= 1e-15);
        assert!(build_control(&init, &obj, &model, 11).is_err());
        assert!(ControlObjective::scalar(-1.0, 0.5, vec![DVector::zeros(1)], vec![DVector::zeros(1)]).is_err());
    }

    #[test]
    fn control_cost_cases() {
        let (u_ref, y_ref) = step_references(2.0);
        let obj = ControlObjective::scalar(5.0, 0.5, u_ref.clone(), y_ref.clone()).unwrap();
        let mut z = DVector::zeros(80);
        for k in 0..30 {
            z[20 + 2 * k] = u_ref[k][0];
            z[21 + 2 * k] = y_ref[k][0];
        }
        assert_eq!(control_cost(&z, &obj, 10).unwrap(), 0.0);

        let one = ControlObjective::scalar(5.0, 0.5, vec![DVector::zeros(1)], vec![DVector::zeros(1)]).unwrap();
        let z1 = DVector::from_vec(vec![0.0, 0.0, 0.0, 2.0]);
        assert_abs_diff_eq!(control_cost(&z1, &one, 1).unwrap(), 2.0, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zr = DVector::from_fn(80, |_, _| rng.random_range(-2.0..2.0));
        let mut sum = 0.0;
        for t in 10..40 {
            let du = zr[2 * t] - u_ref[t - 10][0];
            let dy = zr[2 * t + 1] - y_ref[t - 10][0];
            sum += (0.5 / 5.0) * du * du + dy * dy;
        }
        assert_abs_diff_eq!(control_cost(&zr, &obj, 10).unwrap(), (sum / 30.0).sqrt(), epsilon = 1e-14);
    }
}
