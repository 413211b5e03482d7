//! Long-horizon trajectory generation from a trained model under three
//! reencoding schemes: never (pure latent flow), every step, and periodic.
//! Includes a parallel prefix-scan latent unroll and the MSE evaluation
//! harness used by the experiment pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::koopman::oracles::switching_oracle;
use crate::koopman::{DiscreteOperators, KoopmanError, KoopmanParams};
use crate::linalg::{expm, Mat};
use crate::EXPLOSION_NORM;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout plan: {0}")]
    Plan(String),
    #[error("control sequence is {got_rows}x{got_cols}, need at least {need_rows} rows of width {need_cols}")]
    ControlShape { need_rows: usize, need_cols: usize, got_rows: usize, got_cols: usize },
    #[error("rollout exploded at step {step}: norm {norm:.3e}")]
    Explosion { step: usize, norm: f64 },
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Bilinear-discretized operators, one latent step per sample.
    Discrete,
    /// Exact matrix-exponential flow of the continuous generator,
    /// sampled on the model's step-size grid. Uncontrolled models only.
    Continuous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub horizon: usize,
    /// 0 = never reencode; 1 = every step; k = after every k latent steps.
    pub reencode_period: usize,
    pub mode: RolloutMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<Mat>,
}

impl RolloutPlan {
    pub fn discrete(horizon: usize, reencode_period: usize) -> RolloutPlan {
        RolloutPlan { horizon, reencode_period, mode: RolloutMode::Discrete, controls: None }
    }

    /// Continuous-time plan given real time spans: both the horizon and the
    /// reencoding interval must sit on the model's step-size grid.
    pub fn continuous_time(
        t_span: f64,
        reencode_every: Option<f64>,
        delta: f64,
    ) -> Result<RolloutPlan, RolloutError> {
        let to_steps = |t: f64, what: &str| -> Result<usize, RolloutError> {
            if !(t > 0.0 && t.is_finite()) {
                return Err(RolloutError::Plan(format!("{what} must be positive, got {t}")));
            }
            let n = (t / delta).round();
            if n < 1.0 || (t - n * delta).abs() > 1e-6 * t.abs().max(1.0) {
                return Err(RolloutError::Plan(format!(
                    "{what} {t} is not a multiple of the model step size {delta}"
                )));
            }
            Ok(n as usize)
        };
        let horizon = to_steps(t_span, "t_span")?;
        let reencode_period = match reencode_every {
            Some(dt) => to_steps(dt, "reencode interval")?,
            None => 0,
        };
        Ok(RolloutPlan { horizon, reencode_period, mode: RolloutMode::Continuous, controls: None })
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.reencode_period > self.horizon {
            return Err(RolloutError::Plan(format!(
                "reencode period {} exceeds horizon {}",
                self.reencode_period, self.horizon
            )));
        }
        if self.mode == RolloutMode::Continuous && self.controls.is_some() {
            return Err(RolloutError::Plan(
                "continuous mode is control-free; controls belong to discrete plans".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Row t is the decoded state at step t; row 0 is the reconstruction
    /// of the initial condition.
    pub predicted_states: Mat,
    /// Latents per step. At a reencode index this holds the reencoded
    /// latent (the one that generates subsequent steps).
    pub predicted_latents: Mat,
    pub reencode_indices: Vec<usize>,
}

/// One-step latent transition matrices for a fixed model and mode.
enum StepKernel {
    Linear { k: Mat, l: Option<Mat> },
    Nonlinear,
}

fn build_kernel(model: &KoopmanParams, mode: RolloutMode) -> Result<StepKernel, RolloutError> {
    if model.latent_mlp.is_some() {
        if mode == RolloutMode::Continuous {
            return Err(RolloutError::Plan(
                "nonlinear latent dynamics has no exact continuous flow".to_string(),
            ));
        }
        return Ok(StepKernel::Nonlinear);
    }
    match mode {
        RolloutMode::Discrete => {
            let ops = model.discretize()?;
            Ok(StepKernel::Linear { k: ops.k_disc, l: ops.l_disc })
        }
        RolloutMode::Continuous => {
            if model.l_cont.is_some() {
                return Err(RolloutError::Plan(
                    "continuous mode is control-free; this model carries a control map".to_string(),
                ));
            }
            Ok(StepKernel::Linear { k: expm(&model.effective_k().scale(model.delta())), l: None })
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rollout_inner(
    model: &KoopmanParams,
    kernel: &StepKernel,
    x0: &[f64],
    plan: &RolloutPlan,
    controls: Option<&Mat>,
) -> Result<RolloutResult, RolloutError> {
    plan.validate()?;
    let h = plan.horizon;
    let d = model.state_dim();
    let n = model.latent_dim();
    let k_period = plan.reencode_period;

    // encode controls up front; v_t drives the step producing index t+1
    let encoded_controls: Option<Mat> = match (&model.action_encoder, controls) {
        (Some(enc), Some(u)) => {
            if u.rows() < h || u.cols() != enc.config.input_dim {
                return Err(RolloutError::ControlShape {
                    need_rows: h,
                    need_cols: enc.config.input_dim,
                    got_rows: u.rows(),
                    got_cols: u.cols(),
                });
            }
            Some(enc.forward(u))
        }
        (Some(_), None) if h > 0 && model.latent_mlp.is_none() => {
            return Err(RolloutError::Koopman(KoopmanError::MissingLatentControl));
        }
        (None, Some(_)) => {
            return Err(RolloutError::Koopman(KoopmanError::UnexpectedLatentControl));
        }
        _ => None,
    };

    let mut states = Mat::zeros(h + 1, d);
    let mut latents = Mat::zeros(h + 1, n);
    let mut reencode_indices = Vec::new();

    let mut z = model.encode(x0)?;
    let x_rec = model.decode(&z)?;
    latents.row_mut(0).copy_from_slice(&z);
    states.row_mut(0).copy_from_slice(&x_rec);

    for step in 1..=h {
        z = match kernel {
            StepKernel::Linear { k, l } => {
                let mut next = k.matvec(&z);
                if let (Some(l), Some(v)) = (l, &encoded_controls) {
                    let lv = l.matvec(v.row(step - 1));
                    for (a, b) in next.iter_mut().zip(&lv) {
                        *a += b;
                    }
                }
                next
            }
            StepKernel::Nonlinear => {
                model.latent_mlp.as_ref().expect("nonlinear kernel").forward_vec(&z)
            }
        };
        let zn = norm2(&z);
        if !zn.is_finite() || zn > EXPLOSION_NORM {
            return Err(RolloutError::Explosion { step, norm: zn });
        }
        let x = model.decode(&z)?;
        let xn = norm2(&x);
        if !xn.is_finite() || xn > EXPLOSION_NORM {
            return Err(RolloutError::Explosion { step, norm: xn });
        }
        states.row_mut(step).copy_from_slice(&x);
        if k_period > 0 && step % k_period == 0 && step < h {
            z = model.encode(&x)?;
            reencode_indices.push(step);
        }
        latents.row_mut(step).copy_from_slice(&z);
    }

    Ok(RolloutResult { predicted_states: states, predicted_latents: latents, reencode_indices })
}

/// Roll out under the plan's scheme; the general entry point.
pub fn rollout(
    model: &KoopmanParams,
    x0: &[f64],
    plan: &RolloutPlan,
) -> Result<RolloutResult, RolloutError> {
    plan.validate()?;
    let kernel = build_kernel(model, plan.mode)?;
    rollout_inner(model, &kernel, x0, plan, plan.controls.as_ref())
}

/// Pure latent flow: encode once, advance linearly, decode every step.
pub fn rollout_no_reencode(
    model: &KoopmanParams,
    x0: &[f64],
    plan: &RolloutPlan,
) -> Result<RolloutResult, RolloutError> {
    if plan.reencode_period != 0 {
        return Err(RolloutError::Plan(format!(
            "no-reencode rollout requires reencode_period 0, got {}",
            plan.reencode_period
        )));
    }
    rollout(model, x0, plan)
}

/// Decode and reencode after every `reencode_period` latent steps.
pub fn rollout_periodic(
    model: &KoopmanParams,
    x0: &[f64],
    plan: &RolloutPlan,
) -> Result<RolloutResult, RolloutError> {
    if plan.reencode_period == 0 {
        return Err(RolloutError::Plan(
            "periodic rollout requires reencode_period >= 1".to_string(),
        ));
    }
    rollout(model, x0, plan)
}

// ---------------------------------------------------------------------------
// Parallel prefix-scan latent unroll

#[derive(Clone)]
struct AffineMap {
    a: Mat,
    b: Vec<f64>,
}

/// (second ∘ first)(z) = second.a (first.a z + first.b) + second.b
fn compose(second: &AffineMap, first: &AffineMap) -> AffineMap {
    let a = second.a.matmul(&first.a);
    let mut b = second.a.matvec(&first.b);
    for (o, s) in b.iter_mut().zip(&second.b) {
        *o += s;
    }
    AffineMap { a, b }
}

const SCAN_LEAF: usize = 8;

/// In place, maps[i] becomes maps[i] ∘ ... ∘ maps[0]. The recursion tree is
/// a function of the length alone, so results are bit-identical no matter
/// how rayon schedules the halves.
fn scan_affine(maps: &mut [AffineMap]) {
    let len = maps.len();
    if len <= 1 {
        return;
    }
    if len <= SCAN_LEAF {
        for i in 1..len {
            let (done, rest) = maps.split_at_mut(i);
            rest[0] = compose(&rest[0], &done[i - 1]);
        }
        return;
    }
    let mid = len / 2;
    let (left, right) = maps.split_at_mut(mid);
    rayon::join(|| scan_affine(left), || scan_affine(right));
    let total = left[mid - 1].clone();
    right.par_iter_mut().for_each(|m| *m = compose(m, &total));
}

/// Unroll z_{t+1} = K z_t + L v_t for `n_steps` via an associative prefix
/// scan over affine maps. Row 0 of the result is z0. `controls` are the
/// already encoded actions, one row per step.
pub fn latent_unroll_scan(
    ops: &DiscreteOperators,
    z0: &[f64],
    controls: Option<&Mat>,
    n_steps: usize,
) -> Result<Mat, RolloutError> {
    let n = ops.k_disc.rows();
    if z0.len() != n {
        return Err(RolloutError::Koopman(KoopmanError::LatentDim { expected: n, got: z0.len() }));
    }
    if n_steps == 0 {
        return Err(RolloutError::Plan("scan unroll needs n_steps >= 1".to_string()));
    }
    if ops.l_disc.is_some() && controls.is_none() {
        return Err(RolloutError::Koopman(KoopmanError::MissingLatentControl));
    }
    if let Some(v) = controls {
        if v.rows() < n_steps {
            return Err(RolloutError::ControlShape {
                need_rows: n_steps,
                need_cols: ops.l_disc.as_ref().map_or(0, Mat::cols),
                got_rows: v.rows(),
                got_cols: v.cols(),
            });
        }
    }
    let mut maps: Vec<AffineMap> = (0..n_steps)
        .map(|t| {
            let b = match (&ops.l_disc, controls) {
                (Some(l), Some(v)) => l.matvec(v.row(t)),
                _ => vec![0.0; n],
            };
            AffineMap { a: ops.k_disc.clone(), b }
        })
        .collect();
    scan_affine(&mut maps);
    let mut out = Mat::zeros(n_steps + 1, n);
    out.row_mut(0).copy_from_slice(z0);
    let rows: Vec<Vec<f64>> = maps
        .par_iter()
        .map(|m| {
            let mut z = m.a.matvec(z0);
            for (a, b) in z.iter_mut().zip(&m.b) {
                *a += b;
            }
            z
        })
        .collect();
    for (t, row) in rows.iter().enumerate() {
        out.row_mut(t + 1).copy_from_slice(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation harness

/// Ground-truth trajectory for evaluation: states with (for forced systems)
/// the control sequence that produced them.
pub struct EvalCase<'a> {
    pub states: &'a Mat,
    pub controls: Option<&'a Mat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub mode: RolloutMode,
    pub horizon: usize,
    pub reencode_period: usize,
    pub n_rollouts: usize,
    /// Rollouts that hit the explosion threshold; any explosion voids the
    /// headline MSE (reported as null) rather than skewing the average.
    pub exploded: usize,
    pub first_explosion_step: Option<usize>,
    pub mse: Option<f64>,
    /// Mean squared error at each step 1..=horizon, averaged over surviving
    /// rollouts and state dimensions.
    pub per_step_mse: Vec<Option<f64>>,
}

/// Evaluate every plan against every ground-truth trajectory. Rollouts run
/// in parallel per trajectory; results are order-stable.
pub fn evaluate_mse(
    model: &KoopmanParams,
    eval: &[EvalCase],
    plans: &[RolloutPlan],
) -> Result<Vec<PlanMetrics>, RolloutError> {
    let d = model.state_dim() as f64;
    let mut out = Vec::with_capacity(plans.len());
    for plan in plans {
        plan.validate()?;
        if plan.controls.is_some() {
            return Err(RolloutError::Plan(
                "evaluation plans take controls from the eval set".to_string(),
            ));
        }
        let h = plan.horizon;
        for (i, case) in eval.iter().enumerate() {
            if case.states.rows() < h + 1 {
                return Err(RolloutError::Plan(format!(
                    "eval trajectory {i} has {} states, horizon {h} needs {}",
                    case.states.rows(),
                    h + 1
                )));
            }
        }
        let kernel = build_kernel(model, plan.mode)?;
        // per trajectory: squared-error curve, or the explosion step
        let runs: Result<Vec<Result<Vec<f64>, usize>>, RolloutError> = eval
            .par_iter()
            .map(|case| {
                let x0 = case.states.row(0);
                match rollout_inner(model, &kernel, x0, plan, case.controls) {
                    Ok(res) => {
                        let mut curve = Vec::with_capacity(h);
                        for step in 1..=h {
                            let pred = res.predicted_states.row(step);
                            let truth = case.states.row(step);
                            let se: f64 =
                                pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
                            curve.push(se / d);
                        }
                        Ok(Ok(curve))
                    }
                    Err(RolloutError::Explosion { step, .. }) => Ok(Err(step)),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let runs = runs?;

        let exploded = runs.iter().filter(|r| r.is_err()).count();
        let first_explosion_step = runs.iter().filter_map(|r| r.as_ref().err().copied()).min();
        let survivors: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
        let per_step_mse: Vec<Option<f64>> = (0..h)
            .map(|t| {
                if survivors.is_empty() {
                    None
                } else {
                    Some(survivors.iter().map(|c| c[t]).sum::<f64>() / survivors.len() as f64)
                }
            })
            .collect();
        let mse = if exploded == 0 && !survivors.is_empty() && h > 0 {
            Some(per_step_mse.iter().map(|v| v.unwrap()).sum::<f64>() / h as f64)
        } else {
            None
        };
        out.push(PlanMetrics {
            mode: plan.mode,
            horizon: h,
            reencode_period: plan.reencode_period,
            n_rollouts: eval.len(),
            exploded,
            first_explosion_step,
            mse,
            per_step_mse,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Switching-dynamics support check

/// Outcome of the self-contained switching-model check: a block-diagonal
/// latent generator with region-indicator sparse codes.
#[derive(Debug, Clone, Serialize)]
pub struct SwitchingReport {
    /// Starting in region 1 without reencoding, the region-2 latent block
    /// stays exactly zero for all time.
    pub no_reencode_support_clean: bool,
    /// Mirror clause: starting in region 2, block 1 stays exactly zero.
    pub symmetric_support_clean: bool,
    /// Step at which the growing region-1 flow must cross the boundary,
    /// derived from the discrete growth factor in closed form.
    pub crossing_step_expected: usize,
    /// First step whose stored latent has region-2 support under
    /// every-step reencoding.
    pub crossing_step_observed: Option<usize>,
    pub support_switches_at_crossing: bool,
}

impl SwitchingReport {
    pub fn pass(&self) -> bool {
        self.no_reencode_support_clean
            && self.symmetric_support_clean
            && self.support_switches_at_crossing
    }
}

/// Build the two-region model whose first-region dynamics grow the first
/// coordinate toward the boundary, and verify both support clauses.
pub fn switching_oracle_check() -> Result<SwitchingReport, RolloutError> {
    let alpha = 0.5;
    let delta = 0.1;
    let threshold = 1.0;
    let k1 = Mat::from_vec(2, 2, vec![alpha, 0.0, 0.0, 0.0]);
    let k2 = Mat::from_vec(2, 2, vec![-0.2, 0.0, 0.0, -0.2]);
    let (model, _) = switching_oracle(&k1, &k2, threshold, delta);

    let x0 = [0.5, 0.3];
    let horizon = 60;

    // clause: without reencoding the block support can never change
    let frozen = rollout_no_reencode(&model, &x0, &RolloutPlan::discrete(horizon, 0))?;
    let no_reencode_support_clean = (0..=horizon).all(|t| {
        let z = frozen.predicted_latents.row(t);
        z[2] == 0.0 && z[3] == 0.0
    });

    let x0_r2 = [1.5, 0.3];
    let frozen2 = rollout_no_reencode(&model, &x0_r2, &RolloutPlan::discrete(horizon, 0))?;
    let symmetric_support_clean = (0..=horizon).all(|t| {
        let z = frozen2.predicted_latents.row(t);
        z[0] == 0.0 && z[1] == 0.0
    });

    // every-step reencoding: x1 grows by the bilinear factor r each step,
    // so the crossing step solves x1 r^s >= threshold exactly
    let r = (1.0 + 0.5 * delta * alpha) / (1.0 - 0.5 * delta * alpha);
    let mut expected = 0;
    let mut x1 = x0[0];
    while x1 < threshold {
        x1 *= r;
        expected += 1;
    }
    let reencoded = rollout_periodic(&model, &x0, &RolloutPlan::discrete(horizon, 1))?;
    let crossing_step_observed = (1..=horizon).find(|&t| {
        let z = reencoded.predicted_latents.row(t);
        (z[2] != 0.0 || z[3] != 0.0) && z[0] == 0.0 && z[1] == 0.0
    });
    let support_switches_at_crossing = crossing_step_observed == Some(expected);

    Ok(SwitchingReport {
        no_reencode_support_clean,
        symmetric_support_clean,
        crossing_step_expected: expected,
        crossing_step_observed,
        support_switches_at_crossing,
    })
}
