use ddk_core::baselines::{deepc_regularized, predictor_lambda, predictor_regularized, PartitionedData};
use ddk_core::estimator::{
    estimate_g_nonlinear, marginal_nll, one_iteration_estimate, pinv_init, run_algorithm1, sqp_estimate_g,
    HyperMethod, MarginalProblem,
};
use ddk_core::lti::{random_system, LtiSystem};
use ddk_core::numerics::SolverOptions;
use ddk_core::sigdata::{build_signal_matrix, Construction, SignalMatrix, Trajectory};
use ddk_core::tasks::{build_control, build_prediction, build_smoothing, ControlObjective, TaskSpec};
use ddk_core::uncertainty::{EllipticalFamily, NoiseModel};
use ddk_core::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<DVector<f64>> {
    (0..n).map(|_| DVector::from_element(1, gauss(rng))).collect()
}

/// Offline signal matrix with output noise of variance `sd2`.
fn offline(rng: &mut ChaCha8Rng, sys: &LtiSystem, len: usize, l: usize, c: Construction, sd2: f64) -> SignalMatrix {
    let u = inputs(rng, len);
    let mut y = sys.simulate(&u, &DVector::zeros(sys.n_x())).unwrap();
    for v in &mut y {
        v[0] += sd2.sqrt() * gauss(rng);
    }
    build_signal_matrix(&Trajectory::new(u, y).unwrap(), l, c).unwrap()
}

fn true_window(rng: &mut ChaCha8Rng, sys: &LtiSystem, l: usize) -> Trajectory {
    let u = inputs(rng, l);
    let x0 = DVector::from_fn(sys.n_x(), |_, _| gauss(rng));
    let y = sys.simulate(&u, &x0).unwrap();
    Trajectory::new(u, y).unwrap()
}

fn noisy_outputs(rng: &mut ChaCha8Rng, t: &Trajectory, s2: f64) -> Trajectory {
    let y = t.y.iter().map(|v| v.map(|x| x + s2.sqrt() * gauss(rng))).collect();
    Trajectory::new(t.u.clone(), y).unwrap()
}

const SD2: f64 = 1e-4;
const S2: f64 = 1e-2;

fn t2_case(seed: u64, construction: Construction) -> (TaskSpec, SignalMatrix, NoiseModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = random_system(3, 1, 1, &mut rng).unwrap();
    let (l, l0) = (10, 4);
    let h = offline(&mut rng, &sys, 300, l, construction, SD2);
    let truth = true_window(&mut rng, &sys, l);
    let meas = noisy_outputs(&mut rng, &truth.slice(0, l0).unwrap(), S2);
    let online = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, S2).unwrap();
    let task = build_prediction(&meas, &truth.u[l0..], &online, 3).unwrap();
    let off = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, SD2).unwrap();
    (task, h, off)
}

#[test]
fn first_step_equals_regularized_predictor() {
    for seed in 0..10 {
        let (task, h, off) = t2_case(seed, Construction::Page);
        let est = one_iteration_estimate(&task, &h, &off).unwrap();
        let data = PartitionedData::new(&task, &h).unwrap();
        let base = predictor_regularized(&data, predictor_lambda(&data, SD2)).unwrap();
        let err = (&est.g_hat - &base.g).amax();
        assert!(err <= 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn first_step_equals_regularized_deepc() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let sys = random_system(3, 1, 1, &mut rng).unwrap();
        let (l, l0) = (10, 4);
        let h = offline(&mut rng, &sys, 300, l, Construction::Page, SD2);
        let truth = true_window(&mut rng, &sys, l0);
        let meas = noisy_outputs(&mut rng, &truth, S2);
        let y_ref: Vec<_> = (0..l - l0).map(|k| DVector::from_element(1, if k < 3 { 1.0 } else { -1.0 })).collect();
        let u_ref: Vec<_> = y_ref.iter().map(|y| y * 0.5).collect();
        let (q, r) = (5.0, 0.5);
        let obj = ControlObjective::scalar(q, r, u_ref, y_ref).unwrap();
        let online = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, S2).unwrap();
        let task = build_control(&meas, &obj, &online, 3).unwrap();
        let off = NoiseModel::iid_scalar(EllipticalFamily::Gaussian, 1, 1, 0.0, SD2).unwrap();
        let est = one_iteration_estimate(&task, &h, &off).unwrap();
        let g0 = pinv_init(&task, &h).unwrap();
        let data = PartitionedData::new(&task, &h).unwrap();
        let base = deepc_regularized(&data, q, r, S2, SD2, g0.norm_squared()).unwrap();
        let err = (&est.g_hat - &base.g).amax();
        assert!(err <= 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn one_iteration_is_first_sqp_iterate() {
    for seed in 0..5 {
        let (task, h, off) = t2_case(seed, Construction::Hankel);
        let one = one_iteration_estimate(&task, &h, &off).unwrap();
        let opts = SolverOptions { max_iters: 1, ..Default::default() };
        let sqp = sqp_estimate_g(&task, &h, &off, &opts).unwrap();
        if sqp.objective_trace.len() == 2 {
            assert_eq!(one.g_hat, sqp.g_hat);
        } else {
            // rejected first step: SQP stays at the start
            assert!(one.objective_trace[1] > one.objective_trace[0]);
        }
    }
}

#[test]
fn sqp_trace_is_monotone() {
    for seed in 0..10 {
        let (task, h, off) = t2_case(seed, Construction::Hankel);
        let opts = SolverOptions { max_iters: 100, step_tol: 1e-9, ..Default::default() };
        let est = sqp_estimate_g(&task, &h, &off, &opts).unwrap();
        let tr = &est.objective_trace;
        assert!(tr.windows(2).all(|w| w[1] <= w[0]), "{tr:?}");
        assert!(tr.last().unwrap() <= &tr[0]);
    }
}

#[test]
fn nonlinear_improves_on_pinv() {
    for seed in 0..5 {
        let (task, h, off) = t2_case(seed, Construction::Hankel);
        let prob = MarginalProblem::new(&task, &h, &off).unwrap();
        let est = estimate_g_nonlinear(&task, &h, &off, &SolverOptions::default()).unwrap();
        let j0 = prob.value(&prob.project(prob.pinv()));
        assert!(prob.value(&est.g_hat) <= j0);
        let tr = &est.objective_trace;
        assert!(tr.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn pinv_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (task, h, _) = t2_case(3, Construction::Hankel);
    let g0 = pinv_init(&task, &h).unwrap();
    let phi_h = task.observe_rows(&h.h);
    assert!((&task.zeta - &phi_h * &g0).norm() <= 1e-8 * task.zeta.norm());
    let sub = ddk_core::numerics::affine_solutions(&phi_h, &task.zeta, 1e-10, 1e-8).unwrap();
    for _ in 0..100 {
        let w = DVector::from_fn(sub.free_dim(), |_, _| rng.random_range(-1.0..1.0));
        assert!(g0.norm() <= sub.point(&w).norm() + 1e-12);
    }
    // square invertible case
    let mut t = task.clone();
    let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.1 * (i + j) as f64 });
    let hs = SignalMatrix { h: DMatrix::zeros(t.dim(), 4), ..h.clone() };
    let mut hs = hs;
    for (r, &i) in t.rows.iter().take(4).enumerate() {
        hs.h.set_row(i, &a.row(r));
    }
    t.rows.truncate(4);
    t.tags.truncate(4);
    t.zeta = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    t.phi = t.phi.rows(0, 4).into_owned();
    t.sigma_eps = t.sigma_eps.view((0, 0), (4, 4)).into_owned();
    let g = pinv_init(&t, &hs).unwrap();
    let exact = a.clone().lu().solve(&t.zeta).unwrap();
    assert!((g - exact).amax() < 1e-12);
}

#[test]
fn zero_data_shrinks_to_zero() {
    let (mut task, mut h, off) = t2_case(11, Construction::Hankel);
    task.zeta.fill(0.0);
    h.h.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = DVector::from_fn(h.m(), |_, _| rng.random_range(-1.0..1.0));
    let (v, _) = marginal_nll(&task, &h, &off, &g).unwrap();
    let (v0, grad0) = marginal_nll(&task, &h, &off, &DVector::zeros(h.m())).unwrap();
    assert!(v0 < v);
    assert!(grad0.amax() < 1e-12);
}

#[test]
fn noise_free_recovery_all_tasks() {
    let methods = [HyperMethod::Nonlinear, HyperMethod::Sqp, HyperMethod::OneIteration];
    let opts = SolverOptions::default();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let sys = random_system(2, 1, 1, &mut rng).unwrap();
        let (l, l0) = (8, 3);
        let h = offline(&mut rng, &sys, 60, l, Construction::Hankel, 0.0);
        let zero = NoiseModel::zero(EllipticalFamily::Gaussian, 1, 1).unwrap();
        let truth = true_window(&mut rng, &sys, l);
        let z0 = truth.stacked();
        let tasks = [
            build_smoothing(&truth, &zero).unwrap(),
            build_prediction(&truth.slice(0, l0).unwrap(), &truth.u[l0..], &zero, 2).unwrap(),
        ];
        for task in &tasks {
            for m in methods {
                let rep = run_algorithm1(task, &h, &zero, m, &opts).unwrap();
                let err = (&rep.z_hat - &z0).amax();
                assert!(err <= 1e-7, "seed {seed} {:?} {m:?}: {err}", task.kind);
                assert_eq!(rep.residual_prior.amax(), 0.0);
            }
        }
    }
}

#[test]
fn report_serializes() {
    let (task, h, off) = t2_case(1, Construction::Hankel);
    let rep = run_algorithm1(&task, &h, &off, HyperMethod::OneIteration, &SolverOptions::default()).unwrap();
    let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
    assert_eq!(v["z_hat"].as_array().unwrap().len(), task.dim());
    assert_eq!(v["g"]["method"], "one_iteration");
    assert!(v["timing"]["total_ms"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["sigma_g"].as_array().unwrap().len(), task.dim());
}

#[test]
fn sqp_reaches_stationary_point_with_heavy_tails() {
    let t10 = EllipticalFamily::StudentT { xi: 10.0 };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let sys = random_system(4, 1, 1, &mut rng).unwrap();
        let l = 12;
        let h = offline(&mut rng, &sys, 40, l, Construction::Hankel, SD2);
        let truth = true_window(&mut rng, &sys, l);
        let meas = noisy_outputs(&mut rng, &truth, S2);
        let online = NoiseModel::iid_scalar(t10, 1, 1, 0.0, S2).unwrap();
        let off = NoiseModel::iid_scalar(t10, 1, 1, 0.0, SD2).unwrap();
        let task = build_smoothing(&meas, &online).unwrap();
        let prob = MarginalProblem::new(&task, &h, &off).unwrap();
        let est = sqp_estimate_g(&task, &h, &off, &SolverOptions::default()).unwrap();
        let (j, grad) = prob.value_and_gradient(&est.g_hat);
        let pg = prob.feasible().basis.tr_mul(&grad).norm();
        assert!(pg <= 1e-4 * (1.0 + j.abs()), "seed {seed}: projected gradient {pg}");
        assert!(j <= est.objective_trace[0]);
    }
}
