//! Benchmark dynamical systems, integrators, and dataset generation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("state has {got} entries, system expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("control has {got} entries, system expects {expected}")]
    ControlDim { expected: usize, got: usize },
    #[error("system parameter {0} missing")]
    MissingParam(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integration produced a non-finite state at step {step}")]
    Divergence { step: usize },
    #[error("step size underflow at t = {t}: tolerances unreachable (stiff system)")]
    StepUnderflow { t: f64 },
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob {path}: expected {expected} values, found {got}")]
    BlobShape { path: String, expected: usize, got: usize },
    #[error("blob {path} contains non-finite values")]
    BlobNonFinite { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Parabolic,
    Duffing,
    LotkaVolterra,
    Pendulum,
    Lorenz,
    ForcedDuffing,
    ForcedPendulum,
}

impl SystemName {
    pub fn all() -> &'static [SystemName] {
        &[
            SystemName::Parabolic,
            SystemName::Duffing,
            SystemName::LotkaVolterra,
            SystemName::Pendulum,
            SystemName::Lorenz,
            SystemName::ForcedDuffing,
            SystemName::ForcedPendulum,
        ]
    }
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SystemName::Parabolic => "parabolic",
            SystemName::Duffing => "duffing",
            SystemName::LotkaVolterra => "lotka_volterra",
            SystemName::Pendulum => "pendulum",
            SystemName::Lorenz => "lorenz",
            SystemName::ForcedDuffing => "forced_duffing",
            SystemName::ForcedPendulum => "forced_pendulum",
        };
        f.write_str(s)
    }
}

impl FromStr for SystemName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "parabolic" => Ok(SystemName::Parabolic),
            "duffing" => Ok(SystemName::Duffing),
            "lotka_volterra" | "lv" => Ok(SystemName::LotkaVolterra),
            "pendulum" => Ok(SystemName::Pendulum),
            "lorenz" => Ok(SystemName::Lorenz),
            "forced_duffing" => Ok(SystemName::ForcedDuffing),
            "forced_pendulum" => Ok(SystemName::ForcedPendulum),
            other => Err(format!("unknown system '{other}'")),
        }
    }
}

/// Initial-condition distribution. A zero-width box axis is a constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSampler {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    GaussianAround { center: Vec<f64>, std: f64 },
}

impl InitSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            InitSampler::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| if b > a { rng.gen_range(a..b) } else { a })
                .collect(),
            InitSampler::GaussianAround { center, std } => {
                center.iter().map(|&c| c + std * standard_normal(rng)).collect()
            }
        }
    }
}

/// Box-Muller transform; two uniform draws per normal sample.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: SystemName,
    pub params: BTreeMap<String, f64>,
    pub state_dim: usize,
    pub control_dim: usize,
    pub init_sampler: InitSampler,
}

const TEN_DEGREES: f64 = 10.0 * std::f64::consts::PI / 180.0;

impl SystemSpec {
    pub fn named(name: SystemName) -> SystemSpec {
        let p = |entries: &[(&str, f64)]| {
            entries.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>()
        };
        match name {
            SystemName::Parabolic => SystemSpec {
                name,
                params: p(&[("mu", -0.1), ("lambda", -1.0)]),
                state_dim: 2,
                control_dim: 0,
                init_sampler: InitSampler::UniformBox { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0] },
            },
            SystemName::Duffing | SystemName::ForcedDuffing => SystemSpec {
                name,
                params: BTreeMap::new(),
                state_dim: 2,
                control_dim: if name == SystemName::ForcedDuffing { 1 } else { 0 },
                init_sampler: InitSampler::UniformBox { lo: vec![-2.0, -1.0], hi: vec![2.0, 1.0] },
            },
            SystemName::LotkaVolterra => SystemSpec {
                name,
                params: p(&[("alpha", 0.2), ("beta", 0.2), ("gamma", 0.2), ("delta", 0.2)]),
                state_dim: 2,
                control_dim: 0,
                init_sampler: InitSampler::UniformBox {
                    lo: vec![0.02, 0.02],
                    hi: vec![3.0, 3.0],
                },
            },
            SystemName::Pendulum | SystemName::ForcedPendulum => SystemSpec {
                name,
                params: p(&[("g_over_l", 9.81)]),
                state_dim: 2,
                control_dim: if name == SystemName::ForcedPendulum { 1 } else { 0 },
                // Release from rest within ten degrees of the reference angle.
                init_sampler: InitSampler::UniformBox {
                    lo: vec![-TEN_DEGREES, 0.0],
                    hi: vec![TEN_DEGREES, 0.0],
                },
            },
            SystemName::Lorenz => SystemSpec {
                name,
                params: p(&[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)]),
                state_dim: 3,
                control_dim: 0,
                init_sampler: InitSampler::GaussianAround { center: vec![0.0, 1.0, 1.05], std: 1.0 },
            },
        }
    }

    pub fn default_dt(&self) -> f64 {
        match self.name {
            SystemName::Lorenz => 0.02,
            _ => 0.01,
        }
    }

    pub fn is_controlled(&self) -> bool {
        self.control_dim > 0
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.init_sampler.sample(rng)
    }

    fn param(&self, key: &'static str) -> Result<f64, DynError> {
        self.params.get(key).copied().ok_or(DynError::MissingParam(key))
    }

    fn dynamics(&self) -> Result<Dynamics, DynError> {
        Ok(match self.name {
            SystemName::Parabolic => Dynamics::Parabolic {
                mu: self.param("mu")?,
                lambda: self.param("lambda")?,
            },
            SystemName::Duffing => Dynamics::Duffing { forced: false },
            SystemName::ForcedDuffing => Dynamics::Duffing { forced: true },
            SystemName::LotkaVolterra => Dynamics::LotkaVolterra {
                alpha: self.param("alpha")?,
                beta: self.param("beta")?,
                gamma: self.param("gamma")?,
                delta: self.param("delta")?,
            },
            SystemName::Pendulum => {
                Dynamics::Pendulum { g_over_l: self.param("g_over_l")?, forced: false }
            }
            SystemName::ForcedPendulum => {
                Dynamics::Pendulum { g_over_l: self.param("g_over_l")?, forced: true }
            }
            SystemName::Lorenz => Dynamics::Lorenz {
                sigma: self.param("sigma")?,
                rho: self.param("rho")?,
                beta: self.param("beta")?,
            },
        })
    }
}

/// Right-hand sides with parameters resolved out of the spec map.
#[derive(Clone, Copy)]
enum Dynamics {
    Parabolic { mu: f64, lambda: f64 },
    Duffing { forced: bool },
    LotkaVolterra { alpha: f64, beta: f64, gamma: f64, delta: f64 },
    Pendulum { g_over_l: f64, forced: bool },
    Lorenz { sigma: f64, rho: f64, beta: f64 },
}

impl Dynamics {
    fn eval(&self, x: &[f64], u: Option<&[f64]>, out: &mut [f64]) {
        match *self {
            Dynamics::Parabolic { mu, lambda } => {
                out[0] = mu * x[0];
                out[1] = lambda * (x[1] - x[0] * x[0]);
            }
            Dynamics::Duffing { forced } => {
                out[0] = x[1];
                out[1] = x[0] - x[0] * x[0] * x[0];
                if forced {
                    out[1] += u.map_or(0.0, |u| u[0]);
                }
            }
            Dynamics::LotkaVolterra { alpha, beta, gamma, delta } => {
                out[0] = alpha * x[0] - beta * x[0] * x[1];
                out[1] = delta * x[0] * x[1] - gamma * x[1];
            }
            Dynamics::Pendulum { g_over_l, forced } => {
                out[0] = x[1];
                out[1] = -g_over_l * x[0].sin();
                if forced {
                    out[1] += u.map_or(0.0, |u| u[0]);
                }
            }
            Dynamics::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
        }
    }
}

fn check_dims(spec: &SystemSpec, x: &[f64], u: Option<&[f64]>) -> Result<(), DynError> {
    if x.len() != spec.state_dim {
        return Err(DynError::StateDim { expected: spec.state_dim, got: x.len() });
    }
    let got = u.map_or(0, <[f64]>::len);
    if got != spec.control_dim {
        return Err(DynError::ControlDim { expected: spec.control_dim, got });
    }
    Ok(())
}

/// Governing equations evaluated at one point.
pub fn rhs(spec: &SystemSpec, x: &[f64], u: Option<&[f64]>) -> Result<Vec<f64>, DynError> {
    check_dims(spec, x, u)?;
    let dynamics = spec.dynamics()?;
    let mut out = vec![0.0; spec.state_dim];
    dynamics.eval(x, u, &mut out);
    Ok(out)
}

/// Sampled solution of one system. `states` is (steps+1) x state_dim;
/// controls, when present, hold the input applied over each interval.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Mat,
    pub controls: Option<Mat>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.rows() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }
}

struct RkWork {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl RkWork {
    fn new(dim: usize) -> Self {
        RkWork {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

fn rk4_step<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    x: &[f64],
    dt: f64,
    out: &mut [f64],
    w: &mut RkWork,
) {
    let d = x.len();
    f(x, &mut w.k1);
    for i in 0..d {
        w.tmp[i] = x[i] + 0.5 * dt * w.k1[i];
    }
    f(&w.tmp, &mut w.k2);
    for i in 0..d {
        w.tmp[i] = x[i] + 0.5 * dt * w.k2[i];
    }
    f(&w.tmp, &mut w.k3);
    for i in 0..d {
        w.tmp[i] = x[i] + dt * w.k3[i];
    }
    f(&w.tmp, &mut w.k4);
    for i in 0..d {
        out[i] = x[i] + dt / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

/// Classical fixed-step RK4. Controls, when given, are held constant over
/// each step (zero-order hold), one row per step.
pub fn integrate_rk4(
    spec: &SystemSpec,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    controls: Option<&Mat>,
) -> Result<Trajectory, DynError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(DynError::InvalidArgument("n_steps must be at least 1".into()));
    }
    let u0 = controls.map(|c| c.row(0));
    check_dims(spec, x0, u0)?;
    if let Some(c) = controls {
        if c.rows() != n_steps {
            return Err(DynError::InvalidArgument(format!(
                "controls have {} rows, expected one per step ({n_steps})",
                c.rows()
            )));
        }
    } else if spec.control_dim > 0 {
        return Err(DynError::ControlDim { expected: spec.control_dim, got: 0 });
    }
    let dynamics = spec.dynamics()?;
    let d = spec.state_dim;
    let mut states = Mat::zeros(n_steps + 1, d);
    states.row_mut(0).copy_from_slice(x0);
    let mut w = RkWork::new(d);
    let mut next = vec![0.0; d];
    for step in 0..n_steps {
        let u = controls.map(|c| c.row(step));
        let cur = states.row(step).to_vec();
        rk4_step(&|x: &[f64], out: &mut [f64]| dynamics.eval(x, u, out), &cur, dt, &mut next, &mut w);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(DynError::Divergence { step: step + 1 });
        }
        states.row_mut(step + 1).copy_from_slice(&next);
    }
    Ok(Trajectory { states, controls: controls.cloned(), dt })
}

// Dormand-Prince 5(4) tableau. The systems here are autonomous, so the
// stage-time column is not needed.
const DP_A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights equal the last A row (FSAL); these are the
// (b5 - b4) error weights.
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) with FSAL, sampled exactly at multiples of
/// `sample_dt`. Step-size control: accept when the mixed-tolerance RMS error
/// is at most 1, scale by 0.9 * err^(-1/5) clamped to [0.2, 10].
fn dopri5_core<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    x0: &[f64],
    t_span: f64,
    rel_tol: f64,
    abs_tol: f64,
    sample_dt: f64,
) -> Result<Mat, DynError> {
    if !(t_span > 0.0) {
        return Err(DynError::InvalidArgument(format!("t_span must be positive, got {t_span}")));
    }
    if !(rel_tol > 0.0 && abs_tol > 0.0) {
        return Err(DynError::InvalidArgument("tolerances must be positive".into()));
    }
    if !(sample_dt > 0.0) {
        return Err(DynError::InvalidArgument("sample_dt must be positive".into()));
    }
    let n_samples = (t_span / sample_dt).round() as usize;
    if n_samples == 0 || (n_samples as f64 * sample_dt - t_span).abs() > 1e-9 * t_span.max(1.0) {
        return Err(DynError::InvalidArgument(
            "t_span must be a positive multiple of sample_dt".into(),
        ));
    }

    let d = x0.len();
    let mut y = x0.to_vec();
    let mut out = Mat::zeros(n_samples + 1, d);
    out.row_mut(0).copy_from_slice(&y);

    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; d]).collect();
    f(&y, &mut k[0]);
    let mut ytmp = vec![0.0; d];
    let mut y5 = vec![0.0; d];
    let mut t = 0.0_f64;
    let mut h = sample_dt * 0.1;

    for s in 1..=n_samples {
        let t_target = s as f64 * sample_dt;
        while t < t_target - 1e-12 * t_span.max(1.0) {
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(DynError::StepUnderflow { t });
            }
            let h_step = h.min(t_target - t);

            for stage in 1..7 {
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(stage) {
                        acc += DP_A[stage - 1][j] * kj[i];
                    }
                    ytmp[i] = y[i] + h_step * acc;
                }
                if stage == 6 {
                    y5.copy_from_slice(&ytmp);
                }
                let (head, tail) = k.split_at_mut(stage);
                let _ = head;
                f(&ytmp, &mut tail[0]);
            }

            let mut err_sq = 0.0;
            for i in 0..d {
                let e: f64 = h_step * (0..7).map(|j| DP_E[j] * k[j][i]).sum::<f64>();
                let scale = abs_tol + rel_tol * y[i].abs().max(y5[i].abs());
                err_sq += (e / scale) * (e / scale);
            }
            let err = (err_sq / d as f64).sqrt();

            if err <= 1.0 {
                t += h_step;
                y.copy_from_slice(&y5);
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(DynError::Divergence { step: s });
                }
                k.swap(0, 6);
                let factor = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
                h = h_step * factor;
            } else {
                let factor = if err.is_finite() {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
                } else {
                    0.2
                };
                h = h_step * factor;
            }
        }
        t = t_target;
        out.row_mut(s).copy_from_slice(&y);
    }
    Ok(out)
}

/// Adaptive integration of an uncontrolled system, dense-sampled at
/// `sample_dt`. Forced systems need a control sequence; use
/// [`integrate_rk4`] for those.
pub fn integrate_dopri5(
    spec: &SystemSpec,
    x0: &[f64],
    t_span: f64,
    rel_tol: f64,
    abs_tol: f64,
    sample_dt: f64,
) -> Result<Trajectory, DynError> {
    if spec.control_dim > 0 {
        return Err(DynError::InvalidArgument(
            "adaptive integration covers uncontrolled systems; integrate forced systems with \
             a control sequence via integrate_rk4"
                .into(),
        ));
    }
    check_dims(spec, x0, None)?;
    let dynamics = spec.dynamics()?;
    let states = dopri5_core(
        &|x: &[f64], out: &mut [f64]| dynamics.eval(x, None, out),
        x0,
        t_span,
        rel_tol,
        abs_tol,
        sample_dt,
    )?;
    Ok(Trajectory { states, controls: None, dt: sample_dt })
}

/// Exact solution of the parabolic attractor system
/// x1' = mu x1, x2' = lambda (x2 - x1^2):
/// x1(t) = x1(0) e^{mu t},
/// x2(t) = (x2(0) - b x1(0)^2) e^{lambda t} + b x1(0)^2 e^{2 mu t},
/// with b = lambda / (lambda - 2 mu).
pub fn parabolic_closed_form(x0: &[f64], t: f64, mu: f64, lambda: f64) -> Vec<f64> {
    if !(lambda < mu && mu < 0.0) {
        log::warn!("parabolic closed form outside the attractor regime (need lambda < mu < 0)");
    }
    let b = lambda / (lambda - 2.0 * mu);
    let x1 = x0[0] * (mu * t).exp();
    let x2 = (x0[1] - b * x0[0] * x0[0]) * (lambda * t).exp()
        + b * x0[0] * x0[0] * (2.0 * mu * t).exp();
    vec![x1, x2]
}

/// Scripted control signal for the forced systems.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlScript {
    /// u(step) = amplitude * sin(2 pi step / period_steps + phase)
    Sinusoid { amplitude: f64, period_steps: f64, phase: f64 },
    /// Redrawn uniformly from [-amplitude, amplitude] every `hold_steps`.
    PiecewiseConstant { amplitude: f64, hold_steps: usize },
}

impl ControlScript {
    pub fn default_script() -> ControlScript {
        ControlScript::PiecewiseConstant { amplitude: 0.5, hold_steps: 10 }
    }

    /// Materialize n_steps rows of width control_dim. RNG draws happen in
    /// step order so trajectories stay reproducible.
    fn materialize(&self, n_steps: usize, control_dim: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m = Mat::zeros(n_steps, control_dim);
        match *self {
            ControlScript::Sinusoid { amplitude, period_steps, phase } => {
                for s in 0..n_steps {
                    let v = amplitude
                        * (std::f64::consts::TAU * s as f64 / period_steps + phase).sin();
                    for c in 0..control_dim {
                        m[(s, c)] = v;
                    }
                }
            }
            ControlScript::PiecewiseConstant { amplitude, hold_steps } => {
                let hold = hold_steps.max(1);
                let mut current = vec![0.0; control_dim];
                for s in 0..n_steps {
                    if s % hold == 0 {
                        for v in &mut current {
                            *v = rng.gen_range(-amplitude..amplitude);
                        }
                    }
                    m.row_mut(s).copy_from_slice(&current);
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageIndex {
    pub train: Vec<String>,
    pub eval: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_controls: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_controls: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub system: SystemSpec,
    pub dt: f64,
    pub n_train_trajectories: usize,
    pub n_eval_trajectories: usize,
    pub train_len: usize,
    pub eval_len: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlScript>,
    pub storage: StorageIndex,
}

#[derive(Debug, Clone)]
pub struct DatasetRequest {
    pub system: SystemSpec,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_len: usize,
    pub eval_len: usize,
    pub seed: u64,
    /// Defaults to the system's conventional sample interval.
    pub dt: Option<f64>,
    /// Defaults to a seeded piecewise-constant script for forced systems.
    pub control: Option<ControlScript>,
}

/// Datasets are integrated per trajectory with an RNG stream derived from
/// (seed, split, index), so any subset regenerates identically. Eval streams
/// live in a disjoint range from train streams.
const EVAL_STREAM_BASE: u64 = 1 << 32;

/// Tolerances used when generating uncontrolled trajectories adaptively.
const GEN_TOL: f64 = 1e-9;

pub fn generate_dataset(request: &DatasetRequest, out_dir: &Path) -> Result<DatasetManifest, DynError> {
    let spec = &request.system;
    let dt = request.dt.unwrap_or_else(|| spec.default_dt());
    if !(dt > 0.0) {
        return Err(DynError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if request.n_train == 0 || request.train_len == 0 {
        return Err(DynError::InvalidArgument("training split must be nonempty".into()));
    }
    let control = if spec.is_controlled() {
        Some(request.control.clone().unwrap_or_else(ControlScript::default_script))
    } else {
        None
    };
    fs::create_dir_all(out_dir)?;

    let mut storage = StorageIndex {
        train: Vec::new(),
        eval: Vec::new(),
        train_controls: Vec::new(),
        eval_controls: Vec::new(),
    };
    for split in 0..2 {
        let (count, len, stream_base) = if split == 0 {
            (request.n_train, request.train_len, 0)
        } else {
            (request.n_eval, request.eval_len, EVAL_STREAM_BASE)
        };
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
            rng.set_stream(stream_base | i as u64);
            let x0 = spec.sample_initial(&mut rng);
            let traj = match &control {
                Some(script) => {
                    let u = script.materialize(len, spec.control_dim, &mut rng);
                    integrate_rk4(spec, &x0, dt, len, Some(&u))?
                }
                None => integrate_dopri5(spec, &x0, len as f64 * dt, GEN_TOL, GEN_TOL, dt)?,
            };
            let blob_index = if split == 0 { i } else { request.n_train + i };
            let name = format!("traj_{blob_index}.f64");
            write_f64_blob(&out_dir.join(&name), traj.states.data())?;
            let (paths, ctrl_paths) = if split == 0 {
                (&mut storage.train, &mut storage.train_controls)
            } else {
                (&mut storage.eval, &mut storage.eval_controls)
            };
            paths.push(name);
            if let Some(c) = &traj.controls {
                let cname = format!("ctrl_{blob_index}.f64");
                write_f64_blob(&out_dir.join(&cname), c.data())?;
                ctrl_paths.push(cname);
            }
        }
    }

    let manifest = DatasetManifest {
        schema_version: 1,
        system: spec.clone(),
        dt,
        n_train_trajectories: request.n_train,
        n_eval_trajectories: request.n_eval,
        train_len: request.train_len,
        eval_len: request.eval_len,
        seed: request.seed,
        control,
        storage,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Trajectory>,
    pub eval: Vec<Trajectory>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, DynError> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let d = manifest.system.state_dim;
    let m = manifest.system.control_dim;
    let load_split = |paths: &[String],
                      ctrl_paths: &[String],
                      len: usize|
     -> Result<Vec<Trajectory>, DynError> {
        let mut out = Vec::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            let states = read_blob_matrix(&dir.join(p), p, len + 1, d)?;
            let controls = match ctrl_paths.get(i) {
                Some(cp) => Some(read_blob_matrix(&dir.join(cp), cp, len, m)?),
                None => None,
            };
            out.push(Trajectory { states, controls, dt: manifest.dt });
        }
        Ok(out)
    };
    let train = load_split(&manifest.storage.train, &manifest.storage.train_controls, manifest.train_len)?;
    let eval = load_split(&manifest.storage.eval, &manifest.storage.eval_controls, manifest.eval_len)?;
    Ok(LoadedDataset { manifest, train, eval })
}

pub fn write_f64_blob(path: &Path, data: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)
}

pub fn read_f64_blob(path: &Path) -> io::Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_blob_matrix(path: &Path, name: &str, rows: usize, cols: usize) -> Result<Mat, DynError> {
    let data = read_f64_blob(path)?;
    if data.len() != rows * cols {
        return Err(DynError::BlobShape {
            path: name.to_string(),
            expected: rows * cols,
            got: data.len(),
        });
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(DynError::BlobNonFinite { path: name.to_string() });
    }
    Ok(Mat::from_vec(rows, cols, data))
}
