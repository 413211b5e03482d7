//! Experiment pipeline: the JSON config schema, the generate / train / eval
//! stages that every CLI subcommand wraps, deterministic metrics artifacts,
//! and the multi-run comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmd::{fit_dmd, fit_edmd, pairs_from_trajectories, DmdError, EdmdModel};
use crate::dynsys::{
    generate_dataset, load_dataset, DatasetManifest, DatasetRequest, DynError, LoadedDataset,
    SystemName, SystemSpec,
};
use crate::gradengine::Monomial;
use crate::koopman::{
    load_model, DecoderConfig, KoopmanError, KoopmanParams, KStructure, ModelConfig,
};
use crate::linalg::Mat;
use crate::rollout::{evaluate_mse, rollout, EvalCase, PlanMetrics, RolloutError, RolloutPlan};
use crate::training::{fit_mlp_baseline, train, TrainConfig, TrainError};

pub const SCHEMA_VERSION: u32 = 1;

/// RNG stream for model initialization, disjoint from dataset-generation
/// and training streams.
const MODEL_INIT_STREAM: u64 = (1 << 48) | 2;

/// Eval trajectories drawn into phase-portrait CSVs.
const PHASE_PORTRAITS: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Dmd(#[from] DmdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSection {
    /// One of the built-in benchmark systems.
    pub name: String,
    /// Overrides applied on top of the system's default parameters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_eval: usize,
    /// Transitions per training trajectory (states = len + 1).
    pub train_len: usize,
    pub eval_len: usize,
    /// Defaults to the system's conventional sample interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_decoder() -> DecoderConfig {
    DecoderConfig::Linear
}
fn default_control_embedding() -> usize {
    128
}
fn default_action_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub latent_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder")]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub k_structure: KStructure,
    #[serde(default)]
    pub nonlinear_latent: bool,
    /// Defaults to the dataset sample interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_delta: Option<f64>,
    #[serde(default = "default_control_embedding")]
    pub control_embedding: usize,
    #[serde(default = "default_action_hidden")]
    pub action_hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub horizons: Vec<usize>,
    /// 0 = no reencoding, 1 = every step, k = every k steps.
    pub reencode_periods: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub eval: EvalSection,
    /// Also fit and evaluate the capacity-matched MLP baseline.
    #[serde(default)]
    pub baseline: bool,
}

impl ExperimentConfig {
    /// Every violation in one pass, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() {
            errs.push("name must be nonempty".to_string());
        }
        let spec = match self.system_spec() {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(e);
                None
            }
        };
        let ds = &self.dataset;
        if ds.n_train == 0 || ds.train_len == 0 {
            errs.push("dataset training split must be nonempty".to_string());
        }
        if ds.n_eval == 0 || ds.eval_len == 0 {
            errs.push("dataset eval split must be nonempty".to_string());
        }
        if let Some(dt) = ds.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                errs.push(format!("dataset dt must be positive, got {dt}"));
            }
        }
        if self.eval.horizons.is_empty() {
            errs.push("eval.horizons must be nonempty".to_string());
        }
        if self.eval.reencode_periods.is_empty() {
            errs.push("eval.reencode_periods must be nonempty".to_string());
        }
        for &h in &self.eval.horizons {
            if h == 0 {
                errs.push("eval horizons must be at least 1".to_string());
            }
            if h > ds.eval_len {
                errs.push(format!(
                    "eval horizon {h} exceeds eval trajectory length {}",
                    ds.eval_len
                ));
            }
        }
        if let (Some(&k_max), Some(&h_min)) = (
            self.eval.reencode_periods.iter().max(),
            self.eval.horizons.iter().min(),
        ) {
            if k_max > h_min {
                errs.push(format!(
                    "reencode period {k_max} exceeds the shortest horizon {h_min}"
                ));
            }
        }
        if ds.train_len < self.train.seq_len {
            errs.push(format!(
                "train.seq_len {} exceeds training trajectory length {}",
                self.train.seq_len, ds.train_len
            ));
        }
        if let Some(spec) = &spec {
            let model_cfg = self.assemble_model_config(spec);
            errs.extend(model_cfg.validate().into_iter().map(|e| format!("model: {e}")));
            if self.baseline && self.model.nonlinear_latent {
                errs.push(
                    "baseline comparison is meaningless with nonlinear latent dynamics enabled"
                        .to_string(),
                );
            }
        }
        errs.extend(self.train.validate().into_iter().map(|e| format!("train: {e}")));
        errs
    }

    pub fn system_spec(&self) -> Result<SystemSpec, String> {
        let name: SystemName = self.system.name.parse()?;
        let mut spec = SystemSpec::named(name);
        for (k, v) in &self.system.params {
            if !spec.params.contains_key(k) {
                return Err(format!("system {name} has no parameter '{k}'"));
            }
            spec.params.insert(k.clone(), *v);
        }
        Ok(spec)
    }

    pub fn dt(&self, spec: &SystemSpec) -> f64 {
        self.dataset.dt.unwrap_or_else(|| spec.default_dt())
    }

    pub fn assemble_model_config(&self, spec: &SystemSpec) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            state_dim: spec.state_dim,
            latent_dim: m.latent_dim,
            control_dim: spec.control_dim,
            control_embedding: if spec.control_dim > 0 { m.control_embedding } else { 0 },
            action_hidden: m.action_hidden.clone(),
            encoder: crate::koopman::EncoderConfig::Mlp { hidden: m.encoder_hidden.clone() },
            decoder: m.decoder.clone(),
            k_structure: m.k_structure,
            init_delta: m.init_delta.unwrap_or_else(|| self.dt(spec)),
            nonlinear_latent: m.nonlinear_latent,
        }
    }

    /// The training config actually used: all randomness flows from the
    /// experiment seed.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }
}

/// Parse and fully validate a config file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, PipelineError> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(vec![e.to_string()]))?;
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(PipelineError::Config(errs));
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// Metrics artifacts

/// Headline numbers for one (horizon, reencode period) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanSummary {
    pub n_rollouts: usize,
    pub exploded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_explosion_step: Option<usize>,
    /// None when any rollout exploded: the cell renders as a cross marker.
    pub mse: Option<f64>,
}

impl From<&PlanMetrics> for PlanSummary {
    fn from(m: &PlanMetrics) -> Self {
        PlanSummary {
            n_rollouts: m.n_rollouts,
            exploded: m.exploded,
            first_explosion_step: m.first_explosion_step,
            mse: m.mse,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema_version: u32,
    pub experiment: String,
    pub system: String,
    pub seed: u64,
    pub n_eval: usize,
    /// horizon -> reencode period -> summary; BTreeMaps keep the file and
    /// the iteration order deterministic.
    pub plans: BTreeMap<usize, BTreeMap<usize, PlanSummary>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BTreeMap<usize, PlanSummary>>,
}

pub fn read_metrics(path: &Path) -> Result<MetricsDoc, PipelineError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    /// Relative paths of everything the run writes.
    pub artifacts: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Stages

/// Generate the dataset split into `out_dir/data`.
pub fn generate_stage(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    let spec = config.system_spec().map_err(|e| PipelineError::Config(vec![e]))?;
    let request = DatasetRequest {
        system: spec,
        n_train: config.dataset.n_train,
        n_eval: config.dataset.n_eval,
        train_len: config.dataset.train_len,
        eval_len: config.dataset.eval_len,
        seed: config.seed,
        dt: config.dataset.dt,
        control: None,
    };
    Ok(generate_dataset(&request, &out_dir.join("data"))?)
}

/// Initialize and train the model; artifacts land in `out_dir/{losses.jsonl, ckpt/}`.
pub fn train_stage(
    config: &ExperimentConfig,
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<(KoopmanParams, ModelConfig), PipelineError> {
    let spec = config.system_spec().map_err(|e| PipelineError::Config(vec![e]))?;
    let model_config = config.assemble_model_config(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(MODEL_INIT_STREAM);
    let mut model = KoopmanParams::init(&model_config, &mut rng)?;
    train(&mut model, &model_config, &data.train, &config.effective_train(), Some(out_dir))?;
    Ok((model, model_config))
}

fn format_float(v: f64) -> String {
    format!("{v:.12e}")
}

fn write_curves_csv(path: &Path, metrics: &PlanMetrics) -> Result<(), PipelineError> {
    let mut text = String::from("step,mse\n");
    for (i, v) in metrics.per_step_mse.iter().enumerate() {
        match v {
            Some(v) => writeln!(text, "{},{}", i + 1, format_float(*v)).unwrap(),
            None => writeln!(text, "{},NA", i + 1).unwrap(),
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// CSV of a single rollout next to the ground truth it is judged against.
pub fn rollout_csv(predicted: &Mat, truth: Option<&Mat>) -> String {
    let d = predicted.cols();
    let mut text = String::from("step");
    for i in 0..d {
        write!(text, ",pred_{i}").unwrap();
    }
    if truth.is_some() {
        for i in 0..d {
            write!(text, ",true_{i}").unwrap();
        }
    }
    text.push('\n');
    for step in 0..predicted.rows() {
        write!(text, "{step}").unwrap();
        for v in predicted.row(step) {
            write!(text, ",{}", format_float(*v)).unwrap();
        }
        if let Some(t) = truth {
            for v in t.row(step) {
                write!(text, ",{}", format_float(*v)).unwrap();
            }
        }
        text.push('\n');
    }
    text
}

fn slice_rows(m: &Mat, rows: usize) -> Mat {
    let mut out = Mat::zeros(rows, m.cols());
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(m.row(r));
    }
    out
}

/// Evaluate the reencoding grid; writes metrics.json, per-plan MSE curves,
/// and phase-portrait CSVs for the first few eval trajectories.
pub fn eval_stage(
    config: &ExperimentConfig,
    model: &KoopmanParams,
    baseline: Option<&KoopmanParams>,
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<MetricsDoc, PipelineError> {
    fs::create_dir_all(out_dir.join("curves"))?;
    fs::create_dir_all(out_dir.join("phase"))?;
    let cases: Vec<EvalCase> = data
        .eval
        .iter()
        .map(|t| EvalCase { states: &t.states, controls: t.controls.as_ref() })
        .collect();

    let mut horizons = config.eval.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    let mut periods = config.eval.reencode_periods.clone();
    periods.sort_unstable();
    periods.dedup();

    let mut doc = MetricsDoc {
        schema_version: SCHEMA_VERSION,
        experiment: config.name.clone(),
        system: config.system.name.clone(),
        seed: config.seed,
        n_eval: cases.len(),
        plans: BTreeMap::new(),
        baseline: None,
    };

    for &h in &horizons {
        let plans: Vec<RolloutPlan> =
            periods.iter().map(|&k| RolloutPlan::discrete(h, k)).collect();
        let metrics = evaluate_mse(model, &cases, &plans)?;
        let mut row = BTreeMap::new();
        for m in &metrics {
            write_curves_csv(
                &out_dir.join("curves").join(format!("h{h}_k{}.csv", m.reencode_period)),
                m,
            )?;
            row.insert(m.reencode_period, PlanSummary::from(m));
        }
        doc.plans.insert(h, row);
    }

    if let Some(base) = baseline {
        let mut rows = BTreeMap::new();
        for &h in &horizons {
            let metrics = evaluate_mse(base, &cases, &[RolloutPlan::discrete(h, 1)])?;
            write_curves_csv(
                &out_dir.join("curves").join(format!("baseline_h{h}.csv")),
                &metrics[0],
            )?;
            rows.insert(h, PlanSummary::from(&metrics[0]));
        }
        doc.baseline = Some(rows);
    }

    // phase portraits at the longest horizon; exploding rollouts leave no file
    let h_max = *horizons.last().expect("validated nonempty");
    for (i, case) in data.eval.iter().take(PHASE_PORTRAITS).enumerate() {
        for &k in &periods {
            let mut plan = RolloutPlan::discrete(h_max, k);
            plan.controls = case.controls.as_ref().map(|u| slice_rows(u, h_max));
            if let Ok(res) = rollout(model, case.states.row(0), &plan) {
                let truth = slice_rows(&case.states, h_max + 1);
                fs::write(
                    out_dir.join("phase").join(format!("k{k}_traj{i}.csv")),
                    rollout_csv(&res.predicted_states, Some(&truth)),
                )?;
            }
        }
    }

    write_json_pretty(&out_dir.join("metrics.json"), &doc)?;
    Ok(doc)
}

/// The full pipeline: validate, generate, train, (baseline,) evaluate.
/// Rerunning with the same config and seed rewrites every artifact with
/// identical bytes.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<MetricsDoc, PipelineError> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(PipelineError::Config(errs));
    }
    fs::create_dir_all(out_dir)?;

    let mut artifacts: BTreeMap<String, String> = [
        ("dataset", "data/manifest.json"),
        ("losses", "losses.jsonl"),
        ("checkpoint", "ckpt/final.ckpt"),
        ("metrics", "metrics.json"),
        ("curves", "curves/"),
        ("phase", "phase/"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    if config.baseline {
        artifacts.insert("baseline".to_string(), "baseline/".to_string());
    }
    let manifest =
        RunManifest { schema_version: SCHEMA_VERSION, config: config.clone(), artifacts };
    write_json_pretty(&out_dir.join("manifest.json"), &manifest)?;

    generate_stage(config, out_dir)?;
    let data = load_dataset(&out_dir.join("data"))?;
    let (model, model_config) = train_stage(config, &data, out_dir)?;

    let baseline = if config.baseline {
        let base_dir = out_dir.join("baseline");
        fs::create_dir_all(&base_dir)?;
        let out =
            fit_mlp_baseline(&data.train, &model_config, &config.effective_train(), Some(&base_dir))?;
        Some(out.model)
    } else {
        None
    };

    eval_stage(config, &model, baseline.as_ref(), &data, out_dir)
}

// ---------------------------------------------------------------------------
// Checkpoint export

#[derive(Debug, Serialize)]
struct ExportedParam<'a> {
    name: &'a str,
    shape: Vec<usize>,
    data: &'a [f64],
}

/// Dump a binary checkpoint as readable JSON (config, names, shapes, values).
pub fn export_checkpoint(ckpt: &Path, out: &Path) -> Result<(), PipelineError> {
    let (params, config) = load_model(ckpt)?;
    let entries = params.param_entries();
    let exported: Vec<ExportedParam> = entries
        .iter()
        .map(|(name, t)| ExportedParam { name, shape: t.shape.clone(), data: &t.data })
        .collect();
    #[derive(Serialize)]
    struct Doc<'a> {
        model_config: &'a ModelConfig,
        params: Vec<ExportedParam<'a>>,
    }
    write_json_pretty(out, &Doc { model_config: &config, params: exported })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// DMD fitting over a stored dataset

/// All monomials over `d` variables with total degree in 1..=degree,
/// in graded lexicographic order.
pub fn monomials_up_to_degree(d: usize, degree: u32) -> Vec<Monomial> {
    fn extend(d: usize, remaining: u32, from: usize, current: &mut Monomial, out: &mut Vec<Monomial>) {
        for var in from..d {
            for exp in 1..=remaining {
                current.push((var, exp));
                out.push(current.clone());
                extend(d, remaining - exp, var + 1, current, out);
                current.pop();
            }
        }
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    for total in 1..=degree {
        let mut level = Vec::new();
        extend(d, total, 0, &mut current, &mut level);
        // keep only monomials of exactly this total degree for graded order
        level.retain(|m| m.iter().map(|(_, e)| e).sum::<u32>() == total);
        level.sort();
        level.dedup();
        for m in level {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DmdFitReport {
    pub n_pairs: usize,
    pub state_dim: usize,
    /// None for raw-state DMD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift_degree: Option<u32>,
    pub n_features: usize,
    pub fit_residual: f64,
}

/// Fit raw DMD (or monomial-lifted eDMD) on the training split of a stored
/// dataset; writes the model JSON next to nothing else.
pub fn dmd_fit_dataset(
    data_dir: &Path,
    lift_degree: Option<u32>,
    out: &Path,
) -> Result<DmdFitReport, PipelineError> {
    let data = load_dataset(data_dir)?;
    if data.train.iter().any(|t| t.controls.is_some()) {
        return Err(PipelineError::InvalidArgument(
            "DMD fitting expects an uncontrolled dataset".to_string(),
        ));
    }
    let mats: Vec<&Mat> = data.train.iter().map(|t| &t.states).collect();
    let (x, y) = pairs_from_trajectories(&mats)?;
    let d = x.cols();
    let report = match lift_degree {
        None => {
            let model = fit_dmd(&x, &y)?;
            crate::dmd::save_dmd(out, &model)?;
            DmdFitReport {
                n_pairs: x.rows(),
                state_dim: d,
                lift_degree: None,
                n_features: d,
                fit_residual: model.fit_residual,
            }
        }
        Some(degree) => {
            if degree == 0 {
                return Err(PipelineError::InvalidArgument(
                    "lift degree must be at least 1".to_string(),
                ));
            }
            let features = monomials_up_to_degree(d, degree);
            let model = fit_edmd(&x, &y, &features)?;
            let n_features = features.len();
            let mut text = serde_json::to_string_pretty(&model)?;
            text.push('\n');
            fs::write(out, text)?;
            DmdFitReport {
                n_pairs: x.rows(),
                state_dim: d,
                lift_degree: Some(degree),
                n_features,
                fit_residual: model.model.fit_residual,
            }
        }
    };
    Ok(report)
}

pub fn load_edmd(path: &Path) -> Result<EdmdModel, PipelineError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Comparison report

#[derive(Debug)]
pub struct ComparisonReport {
    pub text: String,
    pub csv: String,
}

fn cell(summary: &PlanSummary, best: bool) -> String {
    match summary.mse {
        Some(v) => {
            if best {
                format!("{v:.6e}*")
            } else {
                format!("{v:.6e}")
            }
        }
        None => "x".to_string(),
    }
}

/// Consolidate several runs into one table: rows are (horizon, period)
/// cells, one column per run. Within each column and horizon block the best
/// finite MSE is starred; exploded cells render as a cross marker.
pub fn compare_report(
    inputs: &[(String, MetricsDoc)],
) -> Result<ComparisonReport, PipelineError> {
    if inputs.is_empty() {
        return Err(PipelineError::InvalidArgument("no metrics files given".to_string()));
    }
    let grid: Vec<(usize, Vec<usize>)> = inputs[0]
        .1
        .plans
        .iter()
        .map(|(h, row)| (*h, row.keys().copied().collect()))
        .collect();
    for (label, doc) in inputs.iter().skip(1) {
        let other: Vec<(usize, Vec<usize>)> =
            doc.plans.iter().map(|(h, row)| (*h, row.keys().copied().collect())).collect();
        if other != grid {
            return Err(PipelineError::InvalidArgument(format!(
                "metrics '{label}' covers a different horizon/period grid than '{}'",
                inputs[0].0
            )));
        }
    }

    // per (column, horizon): the period with the best finite mse
    let mut best: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (col, (_, doc)) in inputs.iter().enumerate() {
        for (h, row) in &doc.plans {
            let winner = row
                .iter()
                .filter_map(|(k, s)| s.mse.map(|v| (*k, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, _)) = winner {
                best.insert((col, *h), k);
            }
        }
    }

    let labels: Vec<&str> = inputs.iter().map(|(l, _)| l.as_str()).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (h, ks) in &grid {
        for k in ks {
            let mut row = vec![h.to_string(), k.to_string()];
            for (col, (_, doc)) in inputs.iter().enumerate() {
                let summary = &doc.plans[h][k];
                let is_best = best.get(&(col, *h)) == Some(k);
                row.push(cell(summary, is_best));
            }
            rows.push(row);
        }
    }

    let mut header = vec!["horizon".to_string(), "k".to_string()];
    header.extend(labels.iter().map(|l| l.to_string()));
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r[i].len()).chain([h.len()]).max().unwrap())
        .collect();

    let mut text = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            write!(line, "{:>width$}", c, width = widths[i]).unwrap();
        }
        line
    };
    text.push_str(&fmt_row(&header, &widths));
    text.push('\n');
    let total_width = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    text.push_str(&"-".repeat(total_width));
    text.push('\n');
    let mut last_h = None;
    for row in &rows {
        if last_h.is_some() && last_h != Some(row[0].clone()) {
            text.push('\n');
        }
        last_h = Some(row[0].clone());
        text.push_str(&fmt_row(row, &widths));
        text.push('\n');
    }
    text.push_str("\n* best finite MSE within the column at that horizon; x = exploded\n");

    let mut csv = header.join(",");
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    Ok(ComparisonReport { text, csv })
}
