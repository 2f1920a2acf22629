//! JSON experiment configuration and the three reference presets.

use std::fmt;
use std::path::PathBuf;

use ddk_core::lti::LtiSystem;
use ddk_core::numerics::SolverOptions;
use ddk_core::sigdata::Construction;
use ddk_core::uncertainty::{EllipticalFamily, NoiseModel};
use ddk_core::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindConfig {
    Smoothing,
    Prediction,
    Control,
}

/// A run of `steps` samples all equal to `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub value: Vec<f64>,
    pub steps: usize,
}

fn expand(segments: &[Segment]) -> Vec<DVector<f64>> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(DVector::from_column_slice(&s.value), s.steps))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub q: f64,
    pub r: f64,
    pub y_ref: Vec<Segment>,
    /// Defaults to the steady-state input `dc⁺·y_ref` of the true plant.
    #[serde(default)]
    pub u_ref: Option<Vec<Segment>>,
}

impl ControlConfig {
    pub fn y_reference(&self) -> Vec<DVector<f64>> {
        expand(&self.y_ref)
    }

    pub fn u_reference(&self, sys: &LtiSystem) -> Result<Vec<DVector<f64>>> {
        if let Some(u) = &self.u_ref {
            return Ok(expand(u));
        }
        let dc = sys.dc_gain()?;
        let inv = ddk_core::numerics::pinv(&dc, ddk_core::numerics::RANK_RTOL);
        Ok(self.y_reference().iter().map(|y| &inv * y).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKindConfig,
    pub l: usize,
    /// Initial window length (ignored for smoothing).
    #[serde(default)]
    pub l0: usize,
    #[serde(default)]
    pub control: Option<ControlConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    Random { n_x: usize, n_u: usize, n_y: usize },
    Diffusion { alpha: f64, beta: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Gaussian,
    StudentT,
}

/// Isotropic stationary noise `Σ_w(τ) = σ_w·ρ^τ·I`, `Σ_v(τ) = σ_v·ρ^τ·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub family: FamilyName,
    #[serde(default)]
    pub xi: Option<f64>,
    pub sigma_w: f64,
    pub sigma_v: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub decay_horizon: Option<usize>,
}

impl NoiseConfig {
    pub fn gaussian(sigma_w: f64, sigma_v: f64) -> Self {
        Self { family: FamilyName::Gaussian, xi: None, sigma_w, sigma_v, rho: 0.0, decay_horizon: None }
    }

    pub fn family(&self) -> Result<EllipticalFamily> {
        match (self.family, self.xi) {
            (FamilyName::Gaussian, None) => Ok(EllipticalFamily::Gaussian),
            (FamilyName::Gaussian, Some(_)) => Err(BenchError::Config("xi is only valid for student_t".into())),
            (FamilyName::StudentT, Some(xi)) => Ok(EllipticalFamily::student_t(xi)?),
            (FamilyName::StudentT, None) => Err(BenchError::Config("student_t noise needs xi".into())),
        }
    }

    pub fn model(&self, n_u: usize, n_y: usize) -> Result<NoiseModel> {
        let family = self.family()?;
        if !(self.sigma_w >= 0.0 && self.sigma_v >= 0.0) {
            return Err(BenchError::Config("noise scales must be non-negative".into()));
        }
        let w = DMatrix::identity(n_u, n_u) * self.sigma_w;
        let v = DMatrix::identity(n_y, n_y) * self.sigma_v;
        let model = if self.rho == 0.0 {
            NoiseModel::iid(family, w, v)?
        } else {
            NoiseModel::exponential_decay(family, w, v, self.rho, self.decay_horizon)?
        };
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nonlinear")]
    Nonlinear,
    #[serde(rename = "sqp")]
    Sqp,
    #[serde(rename = "approx")]
    Approx,
    #[serde(rename = "predictor16")]
    Predictor,
    #[serde(rename = "deepc17")]
    Deepc,
    #[serde(rename = "deepc-unreg")]
    DeepcUnreg,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Nonlinear, Method::Sqp, Method::Approx, Method::Predictor, Method::Deepc, Method::DeepcUnreg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nonlinear => "nonlinear",
            Method::Sqp => "sqp",
            Method::Approx => "approx",
            Method::Predictor => "predictor16",
            Method::Deepc => "deepc17",
            Method::DeepcUnreg => "deepc-unreg",
        }
    }

    pub fn is_bayes(self) -> bool {
        matches!(self, Method::Nonlinear | Method::Sqp | Method::Approx)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub multistart_count: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { max_iters: d.max_iters, grad_tol: d.grad_tol, step_tol: d.step_tol, multistart_count: d.multistart_count }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            step_tol: self.step_tol,
            multistart_count: self.multistart_count,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub system: SystemSource,
    /// Offline data length `N`.
    pub n_data: usize,
    pub construction: Construction,
    pub offline_noise: NoiseConfig,
    pub online_noise: NoiseConfig,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Ridge weight of `predictor16`; defaults to `n_y·L₀·σ_v^d`.
    #[serde(default)]
    pub predictor_lambda: Option<f64>,
    /// Penalty on `y_p` for `deepc-unreg`; defaults to `10⁶·q`.
    #[serde(default)]
    pub deepc_unreg_weight: Option<f64>,
    /// Redraw trials whose noise-free data fail the rank condition.
    #[serde(default)]
    pub require_identifiable: bool,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Future horizon `L′ = L − L₀` (zero for smoothing).
    pub fn horizon(&self) -> usize {
        match self.task.kind {
            TaskKindConfig::Smoothing => 0,
            _ => self.task.l.saturating_sub(self.task.l0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.task.l == 0 || self.n_data < self.task.l {
            return bad(format!("need 1 <= L <= N, got L = {}, N = {}", self.task.l, self.n_data));
        }
        if self.construction == Construction::Custom {
            return bad("construction must be page or hankel".into());
        }
        match self.task.kind {
            TaskKindConfig::Smoothing => {}
            _ if self.task.l0 == 0 || self.task.l0 >= self.task.l => {
                return bad(format!("need 1 <= L0 < L, got L0 = {}", self.task.l0));
            }
            _ => {}
        }
        match (self.task.kind, &self.task.control) {
            (TaskKindConfig::Control, None) => return bad("control tasks need a control block".into()),
            (TaskKindConfig::Control, Some(c)) => {
                let lp = self.horizon();
                let steps: usize = c.y_ref.iter().map(|s| s.steps).sum();
                if steps != lp {
                    return bad(format!("y_ref covers {steps} steps, horizon is {lp}"));
                }
                if let Some(u) = &c.u_ref {
                    let steps: usize = u.iter().map(|s| s.steps).sum();
                    if steps != lp {
                        return bad(format!("u_ref covers {steps} steps, horizon is {lp}"));
                    }
                }
                if !(c.q > 0.0 && c.r > 0.0) {
                    return bad("q and r must be positive".into());
                }
            }
            (_, Some(_)) => return bad("control block given for a non-control task".into()),
            _ => {}
        }
        for m in &self.methods {
            let ok = match m {
                Method::Predictor => self.task.kind == TaskKindConfig::Prediction,
                Method::Deepc | Method::DeepcUnreg => self.task.kind == TaskKindConfig::Control,
                _ => true,
            };
            if !ok {
                return bad(format!("method {m} does not apply to {:?} tasks", self.task.kind));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        if let SystemSource::Random { n_x, n_u, n_y } = self.system {
            if n_x == 0 || n_u == 0 || n_y == 0 {
                return bad("system dimensions must be at least 1".into());
            }
        }
        self.offline_noise.family()?;
        self.online_noise.family()?;
        self.solver.options().validate()?;
        Ok(())
    }

    /// Smoothing with Student's t noise on a random 10-state system.
    pub fn preset_t1() -> Self {
        let t = |sv| NoiseConfig { family: FamilyName::StudentT, xi: Some(10.0), ..NoiseConfig::gaussian(0.0, sv) };
        Self {
            task: TaskConfig { kind: TaskKindConfig::Smoothing, l: 40, l0: 0, control: None },
            offline_noise: t(1e-4),
            online_noise: t(1e-2),
            methods: vec![Method::Nonlinear, Method::Sqp, Method::Approx],
            ..Self::random_base()
        }
    }

    /// Prediction with Gaussian white noise on a random 10-state system.
    pub fn preset_t2() -> Self {
        Self {
            task: TaskConfig { kind: TaskKindConfig::Prediction, l: 40, l0: 10, control: None },
            offline_noise: NoiseConfig::gaussian(1e-4, 1e-4),
            online_noise: NoiseConfig::gaussian(1e-2, 1e-2),
            methods: vec![Method::Nonlinear, Method::Sqp, Method::Approx, Method::Predictor],
            ..Self::random_base()
        }
    }

    /// Reference tracking on the diffusion plant with correlated output noise.
    pub fn preset_t3() -> Self {
        let corr = NoiseConfig { rho: 0.9, ..NoiseConfig::gaussian(0.0, 1e-2) };
        let seg = |v: f64| Segment { value: vec![v], steps: 10 };
        Self {
            task: TaskConfig {
                kind: TaskKindConfig::Control,
                l: 40,
                l0: 10,
                control: Some(ControlConfig { q: 5.0, r: 0.5, y_ref: vec![seg(1.0), seg(-1.0), seg(1.0)], u_ref: None }),
            },
            system: SystemSource::Diffusion { alpha: 0.4, beta: 0.3 },
            offline_noise: corr.clone(),
            online_noise: corr,
            methods: vec![Method::Nonlinear, Method::Sqp, Method::Approx, Method::Deepc, Method::DeepcUnreg],
            ..Self::random_base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "t1" => Ok(Self::preset_t1()),
            "t2" => Ok(Self::preset_t2()),
            "t3" => Ok(Self::preset_t3()),
            other => Err(BenchError::Config(format!("unknown preset {other:?} (expected t1, t2 or t3)"))),
        }
    }

    fn random_base() -> Self {
        Self {
            task: TaskConfig { kind: TaskKindConfig::Prediction, l: 40, l0: 10, control: None },
            system: SystemSource::Random { n_x: 10, n_u: 1, n_y: 1 },
            n_data: 100,
            construction: Construction::Hankel,
            offline_noise: NoiseConfig::gaussian(0.0, 0.0),
            online_noise: NoiseConfig::gaussian(0.0, 0.0),
            methods: vec![Method::Approx],
            trials: 100,
            seed: 1,
            out_dir: None,
            solver: SolverConfig::default(),
            predictor_lambda: None,
            deepc_unreg_weight: None,
            require_identifiable: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["t1", "t2", "t3"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::preset_t2().to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::preset_t2().to_json()).unwrap();
        v["offline_noise"]["sigma"] = 1.0.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::preset_t2();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset_t2();
        cfg.methods.push(Method::Deepc);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset_t2();
        cfg.n_data = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset_t3();
        cfg.task.control.as_mut().unwrap().y_ref.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset_t2();
        cfg.online_noise.xi = Some(3.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn correlated_noise_model() {
        let cfg = ExperimentConfig::preset_t3();
        let m = cfg.online_noise.model(1, 1).unwrap();
        assert!((m.sigma_v(2)[(0, 0)] - 1e-2 * 0.81).abs() < 1e-15);
        assert_eq!(m.sigma_w(0)[(0, 0)], 0.0);
    }

    #[test]
    fn default_input_reference_inverts_dc_gain() {
        let sys = ddk_core::lti::make_diffusion_system(0.4, 0.3).unwrap();
        let c = ExperimentConfig::preset_t3().task.control.unwrap();
        let u = c.u_reference(&sys).unwrap();
        let dc = sys.dc_gain().unwrap()[(0, 0)];
        assert_eq!(u.len(), 30);
        assert!((u[0][0] * dc - 1.0).abs() < 1e-12);
        assert!((u[15][0] * dc + 1.0).abs() < 1e-12);
    }
}
