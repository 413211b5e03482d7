//! Three-term sequence loss and the AdamW training loop, with separate
//! learning rates for the dynamics parameters and optional reencoding
//! inside the training unroll.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynsys::Trajectory;
use crate::gradengine::{AdamWConfig, AdamWState, GradError, Tape, Tensor, Var};
use crate::koopman::{save_model, Decoder, KoopmanError, KoopmanParams, KoopmanVars, ModelConfig};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config invalid: {0}")]
    Config(String),
    #[error("{term} loss diverged (non-finite) at step {step}")]
    DivergentLoss { term: &'static str, step: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub reconst: f64,
    pub pred: f64,
}

impl Default for LossWeights {
    /// Alignment plus reconstruction; the prediction term is off by
    /// default for dynamical-systems training.
    fn default() -> Self {
        LossWeights { align: 1.0, reconst: 1.0, pred: 0.0 }
    }
}

fn default_seq_len() -> usize {
    10
}
fn default_batch_size() -> usize {
    64
}
fn default_steps() -> usize {
    50_000
}
fn default_lr_main() -> f64 {
    1e-4
}
fn default_lr_dynamics() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_l1_weight() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr_main")]
    pub lr_main: f64,
    #[serde(default = "default_lr_dynamics")]
    pub lr_dynamics: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_l1_weight")]
    pub l1_weight: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// 0 = never reencode inside the training unroll.
    #[serde(default)]
    pub train_reencode_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: default_seq_len(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            lr_main: default_lr_main(),
            lr_dynamics: default_lr_dynamics(),
            weight_decay: default_weight_decay(),
            l1_weight: default_l1_weight(),
            loss_weights: LossWeights::default(),
            train_reencode_period: 0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.seq_len == 0 {
            errs.push("seq_len must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        let w = &self.loss_weights;
        if w.align < 0.0 || w.reconst < 0.0 || w.pred < 0.0 || self.l1_weight < 0.0 {
            errs.push("loss weights must be non-negative".to_string());
        }
        if w.align == 0.0 && w.reconst == 0.0 && w.pred == 0.0 {
            errs.push("at least one loss weight must be positive".to_string());
        }
        if !(self.lr_main > 0.0) || !(self.lr_dynamics > 0.0) {
            errs.push("learning rates must be positive".to_string());
        }
        if self.weight_decay < 0.0 {
            errs.push("weight_decay must be non-negative".to_string());
        }
        errs
    }
}

/// Per-step loss values; the component fields are unweighted, `total` is
/// the weighted combination actually optimized.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub align: f64,
    pub reconst: f64,
    pub pred: f64,
    pub l1: f64,
    pub total: f64,
}

/// One training window batch, timestep-major: `states[i]` holds the batch
/// states at window offset i (B x d), i = 0..=T; `controls[i]` the actions
/// applied between offsets i and i+1 (B x p), i = 0..T-1.
pub struct Batch {
    pub states: Vec<Mat>,
    pub controls: Option<Vec<Mat>>,
}

/// The differentiable loss graph for one batch.
pub struct LossGraph {
    pub tape: Tape,
    pub vars: KoopmanVars,
    pub total: Var,
    pub report: LossReport,
}

/// Build the sequence loss on a fresh tape:
///   align   sum_{i=1..T} |zhat_i - phi(x_i)|_2
///   reconst sum_{i=0..T} |x_i - psi(phi(x_i))|_2
///   pred    sum_{i=1..T} |x_i - psi(zhat_i)|_2
/// where zhat unrolls the discrete latent dynamics from phi(x_0),
/// reencoded every `train_reencode_period` steps. Norms are Euclidean per
/// window, averaged over the batch; the L1 term applies to the encoder
/// outputs. Terms with zero weight are skipped and reported as 0.
pub fn sequence_loss(
    params: &KoopmanParams,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LossGraph, TrainError> {
    let t_len = batch.states.len();
    if t_len < 2 {
        return Err(TrainError::Config(format!(
            "window must contain at least one transition, got {t_len} state slices"
        )));
    }
    let t_steps = t_len - 1;
    let b = batch.states[0].rows();
    let inv_b = 1.0 / b as f64;
    let controlled = params.l_cont.is_some();
    match (&batch.controls, controlled) {
        (None, true) => {
            return Err(TrainError::Config(
                "model has a control map but the batch has no controls".to_string(),
            ))
        }
        (Some(_), false) => {
            return Err(TrainError::Config(
                "batch has controls but the model is uncontrolled".to_string(),
            ))
        }
        _ => {}
    }
    if let Some(ctrl) = &batch.controls {
        if ctrl.len() != t_steps {
            return Err(TrainError::Config(format!(
                "need {t_steps} control slices, got {}",
                ctrl.len()
            )));
        }
    }

    let w = config.loss_weights;
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);

    let xs: Vec<Var> =
        batch.states.iter().map(|m| tape.leaf(Tensor::from_mat(m))).collect();
    let need_all_encodings = w.align > 0.0 || w.reconst > 0.0 || config.l1_weight > 0.0;
    let mut zs: Vec<Option<Var>> = vec![None; t_len];
    zs[0] = Some(params.encode_on_tape(&mut tape, &vars, xs[0])?);
    if need_all_encodings {
        for i in 1..t_len {
            zs[i] = Some(params.encode_on_tape(&mut tape, &vars, xs[i])?);
        }
    }

    let ops = if params.latent_mlp.is_some() {
        None
    } else {
        Some(params.discretize_on_tape(&mut tape, &vars)?)
    };
    let vs: Vec<Option<Var>> = match &batch.controls {
        Some(ctrl) => {
            let mut out = Vec::with_capacity(t_steps);
            for u in ctrl {
                let uv = tape.leaf(Tensor::from_mat(u));
                out.push(Some(params.encode_action_on_tape(&mut tape, &vars, uv)?));
            }
            out
        }
        None => vec![None; t_steps],
    };

    // latent unroll with optional in-graph reencoding
    let mut zhat = zs[0].expect("initial encoding always built");
    let mut zhats: Vec<Var> = Vec::with_capacity(t_steps);
    let k_period = config.train_reencode_period;
    for i in 1..=t_steps {
        zhat = params.latent_step_on_tape(&mut tape, &vars, ops.as_ref(), zhat, vs[i - 1])?;
        if k_period > 0 && i % k_period == 0 && i < t_steps {
            let decoded = params.decode_on_tape(&mut tape, &vars, zhat)?;
            zhat = params.encode_on_tape(&mut tape, &vars, decoded)?;
        }
        zhats.push(zhat);
    }

    let mut total: Option<Var> = None;
    let mut accumulate = |tape: &mut Tape, term: Var, weight: f64| -> Result<(), GradError> {
        let scaled = tape.scale(term, weight);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    };

    let mut align_v = 0.0;
    let mut reconst_v = 0.0;
    let mut pred_v = 0.0;
    let mut l1_v = 0.0;

    if w.align > 0.0 {
        let mut term: Option<Var> = None;
        for i in 1..=t_steps {
            let diff = tape.sub(zhats[i - 1], zs[i].unwrap())?;
            let norms = tape.sum_row_norms(diff);
            term = Some(match term {
                Some(t) => tape.add(t, norms)?,
                None => norms,
            });
        }
        let term = tape.scale(term.unwrap(), inv_b);
        align_v = tape.value(term).scalar_value();
        accumulate(&mut tape, term, w.align)?;
    }
    if w.reconst > 0.0 {
        let mut term: Option<Var> = None;
        for i in 0..t_len {
            let decoded = params.decode_on_tape(&mut tape, &vars, zs[i].unwrap())?;
            let diff = tape.sub(xs[i], decoded)?;
            let norms = tape.sum_row_norms(diff);
            term = Some(match term {
                Some(t) => tape.add(t, norms)?,
                None => norms,
            });
        }
        let term = tape.scale(term.unwrap(), inv_b);
        reconst_v = tape.value(term).scalar_value();
        accumulate(&mut tape, term, w.reconst)?;
    }
    if w.pred > 0.0 {
        let mut term: Option<Var> = None;
        for i in 1..=t_steps {
            let decoded = params.decode_on_tape(&mut tape, &vars, zhats[i - 1])?;
            let diff = tape.sub(xs[i], decoded)?;
            let norms = tape.sum_row_norms(diff);
            term = Some(match term {
                Some(t) => tape.add(t, norms)?,
                None => norms,
            });
        }
        let term = tape.scale(term.unwrap(), inv_b);
        pred_v = tape.value(term).scalar_value();
        accumulate(&mut tape, term, w.pred)?;
    }
    if config.l1_weight > 0.0 {
        let mut term: Option<Var> = None;
        for z in zs.iter().flatten() {
            let l1 = tape.l1_norm(*z);
            term = Some(match term {
                Some(t) => tape.add(t, l1)?,
                None => l1,
            });
        }
        let term = tape.scale(term.unwrap(), inv_b);
        l1_v = tape.value(term).scalar_value();
        accumulate(&mut tape, term, config.l1_weight)?;
    }

    let total = total.ok_or_else(|| TrainError::Config("all loss weights are zero".to_string()))?;
    let total_v = tape.value(total).scalar_value();

    for (name, value) in
        [("align", align_v), ("reconst", reconst_v), ("pred", pred_v), ("l1", l1_v)]
    {
        if !value.is_finite() {
            return Err(TrainError::DivergentLoss { term: name, step: 0 });
        }
    }
    if !total_v.is_finite() {
        return Err(TrainError::DivergentLoss { term: "total", step: 0 });
    }

    Ok(LossGraph {
        tape,
        vars,
        total,
        report: LossReport {
            step: 0,
            align: align_v,
            reconst: reconst_v,
            pred: pred_v,
            l1: l1_v,
            total: total_v,
        },
    })
}

fn group_config(name: &str, config: &TrainConfig) -> AdamWConfig {
    let mut cfg = AdamWConfig::default();
    if name == "log_delta" {
        cfg.lr = config.lr_dynamics;
        cfg.weight_decay = 0.0;
    } else if name == "k_cont" || name == "l_cont" {
        cfg.lr = config.lr_dynamics;
        cfg.weight_decay = config.weight_decay;
    } else {
        cfg.lr = config.lr_main;
        cfg.weight_decay = config.weight_decay;
    }
    cfg
}

/// Draw one batch of windows, uniform over trajectories and valid offsets.
pub fn sample_batch(
    trajs: &[Trajectory],
    seq_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let t_len = seq_len + 1;
    let d = trajs[0].states.cols();
    let controlled = trajs[0].controls.is_some();
    let p = trajs[0].controls.as_ref().map_or(0, Mat::cols);
    let mut states: Vec<Mat> = (0..t_len).map(|_| Mat::zeros(batch_size, d)).collect();
    let mut controls: Vec<Mat> = if controlled {
        (0..seq_len).map(|_| Mat::zeros(batch_size, p)).collect()
    } else {
        Vec::new()
    };
    for row in 0..batch_size {
        let ti = rng.gen_range(0..trajs.len());
        let traj = &trajs[ti];
        let max_start = traj.states.rows() - t_len;
        let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
        for i in 0..t_len {
            states[i].row_mut(row).copy_from_slice(traj.states.row(start + i));
        }
        if let Some(u) = &traj.controls {
            for i in 0..seq_len {
                controls[i].row_mut(row).copy_from_slice(u.row(start + i));
            }
        }
    }
    Batch { states, controls: controlled.then_some(controls) }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub history: Vec<LossReport>,
}

/// RNG streams for training draws, disjoint from the per-trajectory streams
/// used by dataset generation so one experiment seed never reuses a stream.
const BATCH_STREAM: u64 = 1 << 48;
const BASELINE_INIT_STREAM: u64 = (1 << 48) | 1;

fn snapshot(params: &KoopmanParams) -> Vec<Vec<f64>> {
    params.param_entries().iter().map(|(_, t)| t.data.clone()).collect()
}

fn restore(params: &mut KoopmanParams, snap: &[Vec<f64>]) {
    for ((_, tensor), data) in params.param_entries_mut().into_iter().zip(snap) {
        tensor.data.copy_from_slice(data);
    }
}

/// Minibatch AdamW over sequence losses. Dynamics parameters (k_cont,
/// l_cont, log_delta) train at `lr_dynamics`, everything else at
/// `lr_main`; log_delta is exempt from weight decay. After each step a
/// linear decoder is column-normalized and K is projected onto its
/// structure set. Divergence aborts with the last good parameters intact
/// (and checkpointed when an output directory is given).
pub fn train(
    params: &mut KoopmanParams,
    model_config: &ModelConfig,
    trajs: &[Trajectory],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(TrainError::Config(errs.join("; ")));
    }
    if trajs.is_empty() {
        return Err(TrainError::Config("no training trajectories".to_string()));
    }
    let shortest = trajs.iter().map(|t| t.states.rows()).min().unwrap();
    if shortest < config.seq_len + 1 {
        return Err(TrainError::Config(format!(
            "seq_len {} needs {} states per window but the shortest trajectory has {shortest}",
            config.seq_len,
            config.seq_len + 1
        )));
    }
    let controlled_data = trajs[0].controls.is_some();
    if controlled_data != params.l_cont.is_some() && params.latent_mlp.is_none() {
        return Err(TrainError::Config(
            "dataset and model disagree about controls".to_string(),
        ));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("ckpt"))?;
    }
    let mut losses_file: Option<File> = match out_dir {
        Some(dir) => Some(
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(dir.join("losses.jsonl"))?,
        ),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BATCH_STREAM);
    let mut opt = AdamWState::new();
    let mut history = Vec::with_capacity(config.steps);

    let abort = |params: &mut KoopmanParams,
                     snap: Vec<Vec<f64>>,
                     err: TrainError|
     -> Result<TrainOutput, TrainError> {
        restore(params, &snap);
        if let Some(dir) = out_dir {
            save_model(&dir.join("ckpt").join("last_good.ckpt"), params, model_config)?;
        }
        Err(err)
    };

    for step in 1..=config.steps {
        let snap = snapshot(params);
        let batch = sample_batch(trajs, config.seq_len, config.batch_size, &mut rng);
        let graph = match sequence_loss(params, &batch, config) {
            Ok(g) => g,
            Err(TrainError::DivergentLoss { term, .. }) => {
                return abort(params, snap, TrainError::DivergentLoss { term, step });
            }
            Err(e) => return Err(e),
        };
        let mut report = graph.report.clone();
        report.step = step;

        let grads = graph.tape.backward(graph.total)?;
        let grad_list = params.collect_grads(&graph.vars, &grads);
        drop(graph);

        let mut failed: Option<GradError> = None;
        {
            let entries = params.param_entries_mut();
            for ((name, tensor), (gname, grad)) in entries.into_iter().zip(&grad_list) {
                debug_assert_eq!(&name, gname);
                let cfg = group_config(&name, config);
                if let Err(e) = opt.step(&cfg, &name, tensor, grad) {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            return abort(params, snap, TrainError::Grad(e));
        }

        if matches!(params.decoder, Decoder::Linear { .. }) {
            params.normalize_decoder_columns();
        }
        params.project_k_structure();

        if let Some(f) = &mut losses_file {
            let mut line = serde_json::to_string(&report)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        history.push(report);

        if let (Some(dir), true) = (
            out_dir,
            config.checkpoint_every > 0 && step % config.checkpoint_every == 0,
        ) {
            save_model(&dir.join("ckpt").join(format!("step_{step:07}.ckpt")), params, model_config)?;
        }
    }

    if let Some(f) = &mut losses_file {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        save_model(&dir.join("ckpt").join("final.ckpt"), params, model_config)?;
    }
    Ok(TrainOutput { history })
}

pub struct BaselineOutput {
    pub model: KoopmanParams,
    pub history: Vec<LossReport>,
    /// Encoder + decoder parameter count: the capacity yardstick that the
    /// baseline shares with the model it is compared against.
    pub capacity: usize,
}

/// The single-step MLP baseline: same architecture and capacity, trained
/// with the prediction loss alone and reencoding after every step, which
/// reduces the unroll to iterated state-space prediction.
pub fn fit_mlp_baseline(
    trajs: &[Trajectory],
    model_config: &ModelConfig,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<BaselineOutput, TrainError> {
    let mut config = base.clone();
    config.loss_weights = LossWeights { align: 0.0, reconst: 0.0, pred: 1.0 };
    config.l1_weight = 0.0;
    config.train_reencode_period = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BASELINE_INIT_STREAM);
    let mut model = KoopmanParams::init(model_config, &mut rng)?;
    let capacity = model.autoencoder_param_count();
    let history = if config.steps == 0 {
        Vec::new()
    } else {
        train(&mut model, model_config, trajs, &config, out_dir)?.history
    };
    Ok(BaselineOutput { model, history, capacity })
}
