//! Latent linear-dynamics autoencoder: encoder, decoder, continuous
//! operators K and L with a trainable step size, and their bilinear
//! discretization.

pub mod oracles;

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradengine::{
    read_checkpoint, write_checkpoint, CheckpointError, GradError, Gradients, Mlp, MlpConfig,
    MlpVars, Monomial, Tape, Tensor, Var,
};
use crate::gradengine::Activation;
use crate::linalg::{expm, LinalgError, LuFactor, Mat};

#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("model config invalid: {0}")]
    Config(String),
    #[error("state has {got} entries, expected {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("latent vector has {got} entries, expected {expected}")]
    LatentDim { expected: usize, got: usize },
    #[error("discretization failed: (I - delta/2 K) near-singular, condition estimate {cond:.3e}")]
    Discretization { cond: f64 },
    #[error("latent step needs an encoded control: the model carries a control map")]
    MissingLatentControl,
    #[error("latent step got a control but the model has no control map")]
    UnexpectedLatentControl,
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    CheckpointIo(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KStructure {
    #[default]
    Dense,
    Diagonal,
    SkewSymmetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Mlp { hidden: Vec<usize> },
    /// Fixed monomial dictionary; one feature per latent coordinate.
    Dictionary { features: Vec<Monomial> },
    /// Two-region sparse code splitting on one state coordinate.
    Switching { coord: usize, threshold: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderConfig {
    Linear,
    Mlp { hidden: Vec<usize> },
}

fn default_control_embedding() -> usize {
    128
}

fn default_action_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub control_dim: usize,
    #[serde(default = "default_control_embedding")]
    pub control_embedding: usize,
    #[serde(default = "default_action_hidden")]
    pub action_hidden: Vec<usize>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub k_structure: KStructure,
    /// Initial step size; the trained parameter is its logarithm.
    pub init_delta: f64,
    /// Replace the linear latent step with a 3-layer MLP of the latent
    /// width (ablation). Uncontrolled models only.
    #[serde(default)]
    pub nonlinear_latent: bool,
}

impl ModelConfig {
    /// Standard model for a d-dimensional system: 4-layer ReLU encoder with
    /// width-128 hidden layers, 128-dimensional latent, linear decoder.
    pub fn standard(state_dim: usize, control_dim: usize, init_delta: f64) -> ModelConfig {
        ModelConfig {
            state_dim,
            latent_dim: 128,
            control_dim,
            control_embedding: default_control_embedding(),
            action_hidden: default_action_hidden(),
            encoder: EncoderConfig::Mlp { hidden: vec![128, 128, 128] },
            decoder: DecoderConfig::Linear,
            k_structure: KStructure::Dense,
            init_delta,
            nonlinear_latent: false,
        }
    }

    /// Every violated constraint, one message per violation.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.state_dim == 0 {
            errs.push("state_dim must be positive".to_string());
        }
        if self.latent_dim < self.state_dim {
            errs.push(format!(
                "latent_dim ({}) must be at least state_dim ({}): the latent space is over-complete",
                self.latent_dim, self.state_dim
            ));
        }
        if !(self.init_delta > 0.0 && self.init_delta.is_finite()) {
            errs.push(format!("init_delta must be positive and finite, got {}", self.init_delta));
        }
        match &self.encoder {
            EncoderConfig::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    errs.push("encoder hidden widths must be positive".to_string());
                }
            }
            EncoderConfig::Dictionary { features } => {
                if features.len() != self.latent_dim {
                    errs.push(format!(
                        "dictionary has {} features but latent_dim is {}",
                        features.len(),
                        self.latent_dim
                    ));
                }
                for (i, f) in features.iter().enumerate() {
                    if f.iter().any(|&(idx, _)| idx >= self.state_dim) {
                        errs.push(format!("dictionary feature {i} indexes beyond state_dim"));
                    }
                }
            }
            EncoderConfig::Switching { coord, .. } => {
                if 2 * self.state_dim != self.latent_dim {
                    errs.push(format!(
                        "switching encoder needs latent_dim = 2 * state_dim, got {} vs {}",
                        self.latent_dim, self.state_dim
                    ));
                }
                if *coord >= self.state_dim {
                    errs.push(format!("switching coord {coord} is out of range"));
                }
            }
        }
        if let DecoderConfig::Mlp { hidden } = &self.decoder {
            if hidden.iter().any(|&h| h == 0) {
                errs.push("decoder hidden widths must be positive".to_string());
            }
        }
        if self.control_dim > 0 && self.control_embedding == 0 {
            errs.push("control_embedding must be positive for controlled models".to_string());
        }
        if self.nonlinear_latent && self.control_dim > 0 {
            errs.push("nonlinear latent dynamics supports uncontrolled models only".to_string());
        }
        errs
    }
}

/// State encoder. The dictionary and switching variants carry no trainable
/// parameters; they exist for analytically known embeddings.
#[derive(Debug, Clone)]
pub enum Encoder {
    Mlp(Mlp),
    Dictionary { features: Vec<Monomial>, input_dim: usize },
    Switching { coord: usize, threshold: f64, input_dim: usize },
}

pub enum EncoderVars {
    Mlp(MlpVars),
    Fixed,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.config.input_dim,
            Encoder::Dictionary { input_dim, .. } | Encoder::Switching { input_dim, .. } => {
                *input_dim
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.config.output_dim,
            Encoder::Dictionary { features, .. } => features.len(),
            Encoder::Switching { input_dim, .. } => 2 * input_dim,
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        match self {
            Encoder::Mlp(m) => m.forward(x),
            Encoder::Dictionary { features, .. } => eval_monomials(x, features),
            Encoder::Switching { coord, threshold, .. } => {
                region_select_plain(x, *coord, *threshold)
            }
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> EncoderVars {
        match self {
            Encoder::Mlp(m) => EncoderVars::Mlp(m.vars(tape)),
            _ => EncoderVars::Fixed,
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Result<Var, GradError> {
        match (self, vars) {
            (Encoder::Mlp(m), EncoderVars::Mlp(v)) => m.apply(tape, v, x),
            (Encoder::Dictionary { features, .. }, _) => Ok(tape.monomials(x, features.clone())),
            (Encoder::Switching { coord, threshold, .. }, _) => {
                Ok(tape.region_select(x, *coord, *threshold))
            }
            _ => unreachable!("encoder vars built from a different encoder"),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.param_count(),
            _ => 0,
        }
    }
}

/// Row-wise monomial features; mirrors the tape op exactly.
pub fn eval_monomials(x: &Mat, features: &[Monomial]) -> Mat {
    let (r, _) = (x.rows(), x.cols());
    let k = features.len();
    let mut out = Mat::zeros(r, k);
    for i in 0..r {
        let row = x.row(i);
        for (j, feat) in features.iter().enumerate() {
            let mut v = 1.0;
            for &(idx, p) in feat {
                v *= row[idx].powi(p as i32);
            }
            out[(i, j)] = v;
        }
    }
    out
}

fn region_select_plain(x: &Mat, coord: usize, threshold: f64) -> Mat {
    let (r, d) = (x.rows(), x.cols());
    let mut out = Mat::zeros(r, 2 * d);
    for i in 0..r {
        let row = x.row(i);
        let offset = if row[coord] < threshold { 0 } else { d };
        out.row_mut(i)[offset..offset + d].copy_from_slice(row);
    }
    out
}

/// State decoder. The linear variant stores its weight latent-major
/// (n x d) so a batch decode is `Z * W`; the stored rows are the columns
/// of the usual d x n map.
#[derive(Debug, Clone)]
pub enum Decoder {
    Linear { weight: Tensor },
    Mlp(Mlp),
}

pub enum DecoderVars {
    Linear(Var),
    Mlp(MlpVars),
}

impl Decoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Decoder::Linear { weight } => weight.shape[0],
            Decoder::Mlp(m) => m.config.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Decoder::Linear { weight } => weight.shape[1],
            Decoder::Mlp(m) => m.config.output_dim,
        }
    }

    pub fn forward(&self, z: &Mat) -> Mat {
        match self {
            Decoder::Linear { weight } => z.matmul(&weight.to_mat()),
            Decoder::Mlp(m) => m.forward(z),
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> DecoderVars {
        match self {
            Decoder::Linear { weight } => DecoderVars::Linear(tape.leaf(weight.clone())),
            Decoder::Mlp(m) => DecoderVars::Mlp(m.vars(tape)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &DecoderVars, z: Var) -> Result<Var, GradError> {
        match (self, vars) {
            (Decoder::Linear { .. }, DecoderVars::Linear(w)) => tape.matmul(z, *w),
            (Decoder::Mlp(m), DecoderVars::Mlp(v)) => m.apply(tape, v, z),
            _ => unreachable!("decoder vars built from a different decoder"),
        }
    }

    /// Jacobian-vector product by tangent propagation. ReLU uses the
    /// one-sided derivative (zero at the kink).
    pub fn jvp(&self, z: &[f64], dz: &[f64]) -> Vec<f64> {
        match self {
            Decoder::Linear { weight } => {
                let w = weight.to_mat();
                Mat::from_vec(1, dz.len(), dz.to_vec()).matmul(&w).data().to_vec()
            }
            Decoder::Mlp(m) => {
                let mut value = z.to_vec();
                let mut tangent = dz.to_vec();
                let n_layers = m.layers.len();
                for (l, layer) in m.layers.iter().enumerate() {
                    let w = layer.weight.to_mat();
                    let mut v_next = Mat::from_vec(1, value.len(), value).matmul(&w);
                    for (v, b) in v_next.data_mut().iter_mut().zip(&layer.bias.data) {
                        *v += b;
                    }
                    let t_next = Mat::from_vec(1, tangent.len(), tangent).matmul(&w);
                    value = v_next.data().to_vec();
                    tangent = t_next.data().to_vec();
                    if l + 1 < n_layers && m.config.activation == Activation::Relu {
                        for (t, v) in tangent.iter_mut().zip(&mut value) {
                            if *v <= 0.0 {
                                *t = 0.0;
                                if *v < 0.0 {
                                    *v = 0.0;
                                }
                            }
                        }
                    }
                }
                tangent
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Decoder::Linear { weight } => weight.len(),
            Decoder::Mlp(m) => m.param_count(),
        }
    }
}

/// Discrete-time latent operators produced by the bilinear transform.
#[derive(Debug, Clone)]
pub struct DiscreteOperators {
    pub k_disc: Mat,
    pub l_disc: Option<Mat>,
    pub delta: f64,
}

/// All trainable state of one model.
#[derive(Debug, Clone)]
pub struct KoopmanParams {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub action_encoder: Option<Mlp>,
    pub latent_mlp: Option<Mlp>,
    pub k_cont: Tensor,
    pub l_cont: Option<Tensor>,
    pub log_delta: Tensor,
    pub k_structure: KStructure,
}

impl KoopmanParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self, KoopmanError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(KoopmanError::Config(errs.join("; ")));
        }
        let (d, n) = (config.state_dim, config.latent_dim);
        let encoder = match &config.encoder {
            EncoderConfig::Mlp { hidden } => Encoder::Mlp(Mlp::init(
                MlpConfig {
                    input_dim: d,
                    hidden: hidden.clone(),
                    output_dim: n,
                    activation: Activation::Relu,
                },
                rng,
            )),
            EncoderConfig::Dictionary { features } => {
                Encoder::Dictionary { features: features.clone(), input_dim: d }
            }
            EncoderConfig::Switching { coord, threshold } => {
                Encoder::Switching { coord: *coord, threshold: *threshold, input_dim: d }
            }
        };
        let decoder = match &config.decoder {
            DecoderConfig::Linear => {
                let bound = 1.0 / (n as f64).sqrt();
                let mut w = Tensor::zeros(&[n, d]);
                for v in &mut w.data {
                    *v = rng.gen_range(-bound..bound);
                }
                w.requires_grad = true;
                let mut dec = Decoder::Linear { weight: w };
                normalize_linear_rows(&mut dec);
                dec
            }
            DecoderConfig::Mlp { hidden } => Decoder::Mlp(Mlp::init(
                MlpConfig {
                    input_dim: n,
                    hidden: hidden.clone(),
                    output_dim: d,
                    activation: Activation::Relu,
                },
                rng,
            )),
        };
        let action_encoder = if config.control_dim > 0 {
            Some(Mlp::init(
                MlpConfig {
                    input_dim: config.control_dim,
                    hidden: config.action_hidden.clone(),
                    output_dim: config.control_embedding,
                    activation: Activation::Relu,
                },
                rng,
            ))
        } else {
            None
        };
        let latent_mlp = if config.nonlinear_latent {
            Some(Mlp::init(
                MlpConfig {
                    input_dim: n,
                    hidden: vec![n, n],
                    output_dim: n,
                    activation: Activation::Relu,
                },
                rng,
            ))
        } else {
            None
        };
        // Dynamics matrices share the dense init of the final linear layers.
        let k_bound = 1.0 / (n as f64).sqrt();
        let mut k_cont = Tensor::zeros(&[n, n]);
        for v in &mut k_cont.data {
            *v = rng.gen_range(-k_bound..k_bound);
        }
        k_cont.requires_grad = true;
        let l_cont = (config.control_dim > 0).then(|| {
            let l_bound = 1.0 / (config.control_embedding as f64).sqrt();
            let mut l = Tensor::zeros(&[n, config.control_embedding]);
            for v in &mut l.data {
                *v = rng.gen_range(-l_bound..l_bound);
            }
            l.requires_grad = true;
            l
        });
        let mut log_delta = Tensor::scalar(config.init_delta.ln());
        log_delta.requires_grad = true;
        let mut params = KoopmanParams {
            encoder,
            decoder,
            action_encoder,
            latent_mlp,
            k_cont,
            l_cont,
            log_delta,
            k_structure: config.k_structure,
        };
        params.project_k_structure();
        Ok(params)
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.data[0].exp()
    }

    /// Encoder plus decoder parameter count; the capacity yardstick for
    /// baseline comparisons.
    pub fn autoencoder_param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, KoopmanError> {
        if x.len() != self.state_dim() {
            return Err(KoopmanError::StateDim { expected: self.state_dim(), got: x.len() });
        }
        let m = Mat::from_vec(1, x.len(), x.to_vec());
        Ok(self.encoder.forward(&m).data().to_vec())
    }

    pub fn encode_batch(&self, x: &Mat) -> Result<Mat, KoopmanError> {
        if x.cols() != self.state_dim() {
            return Err(KoopmanError::StateDim { expected: self.state_dim(), got: x.cols() });
        }
        Ok(self.encoder.forward(x))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, KoopmanError> {
        if z.len() != self.latent_dim() {
            return Err(KoopmanError::LatentDim { expected: self.latent_dim(), got: z.len() });
        }
        let m = Mat::from_vec(1, z.len(), z.to_vec());
        Ok(self.decoder.forward(&m).data().to_vec())
    }

    pub fn decode_batch(&self, z: &Mat) -> Result<Mat, KoopmanError> {
        if z.cols() != self.latent_dim() {
            return Err(KoopmanError::LatentDim { expected: self.latent_dim(), got: z.cols() });
        }
        Ok(self.decoder.forward(z))
    }

    pub fn decoder_jvp(&self, z: &[f64], dz: &[f64]) -> Vec<f64> {
        self.decoder.jvp(z, dz)
    }

    /// K with its structure constraint materialized. Idempotent on already
    /// projected parameters.
    pub fn effective_k(&self) -> Mat {
        let k = self.k_cont.to_mat();
        match self.k_structure {
            KStructure::Dense => k,
            KStructure::Diagonal => {
                let n = k.rows();
                let mut out = Mat::zeros(n, n);
                for i in 0..n {
                    out[(i, i)] = k[(i, i)];
                }
                out
            }
            KStructure::SkewSymmetric => k.sub(&k.transpose()).scale(0.5),
        }
    }

    /// Project the stored K onto its structure set; applied after every
    /// optimizer step so the invariant holds exactly.
    pub fn project_k_structure(&mut self) {
        if self.k_structure == KStructure::Dense {
            return;
        }
        let projected = self.effective_k();
        self.k_cont.data.copy_from_slice(projected.data());
    }

    pub fn discretize(&self) -> Result<DiscreteOperators, KoopmanError> {
        discretize_bilinear(
            &self.effective_k(),
            self.l_cont.as_ref().map(Tensor::to_mat).as_ref(),
            self.delta(),
        )
    }

    /// Deterministically ordered named views of every trainable tensor.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Encoder::Mlp(m) = &self.encoder {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("encoder.{i}.weight"), &l.weight));
                out.push((format!("encoder.{i}.bias"), &l.bias));
            }
        }
        match &self.decoder {
            Decoder::Linear { weight } => out.push(("decoder.weight".to_string(), weight)),
            Decoder::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("decoder.{i}.weight"), &l.weight));
                    out.push((format!("decoder.{i}.bias"), &l.bias));
                }
            }
        }
        if let Some(m) = &self.action_encoder {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("action_encoder.{i}.weight"), &l.weight));
                out.push((format!("action_encoder.{i}.bias"), &l.bias));
            }
        }
        if let Some(m) = &self.latent_mlp {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("latent_mlp.{i}.weight"), &l.weight));
                out.push((format!("latent_mlp.{i}.bias"), &l.bias));
            }
        }
        out.push(("k_cont".to_string(), &self.k_cont));
        if let Some(l) = &self.l_cont {
            out.push(("l_cont".to_string(), l));
        }
        out.push(("log_delta".to_string(), &self.log_delta));
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Encoder::Mlp(m) = &mut self.encoder {
            for (i, l) in m.layers.iter_mut().enumerate() {
                out.push((format!("encoder.{i}.weight"), &mut l.weight));
                out.push((format!("encoder.{i}.bias"), &mut l.bias));
            }
        }
        match &mut self.decoder {
            Decoder::Linear { weight } => out.push(("decoder.weight".to_string(), weight)),
            Decoder::Mlp(m) => {
                for (i, l) in m.layers.iter_mut().enumerate() {
                    out.push((format!("decoder.{i}.weight"), &mut l.weight));
                    out.push((format!("decoder.{i}.bias"), &mut l.bias));
                }
            }
        }
        if let Some(m) = &mut self.action_encoder {
            for (i, l) in m.layers.iter_mut().enumerate() {
                out.push((format!("action_encoder.{i}.weight"), &mut l.weight));
                out.push((format!("action_encoder.{i}.bias"), &mut l.bias));
            }
        }
        if let Some(m) = &mut self.latent_mlp {
            for (i, l) in m.layers.iter_mut().enumerate() {
                out.push((format!("latent_mlp.{i}.weight"), &mut l.weight));
                out.push((format!("latent_mlp.{i}.bias"), &mut l.bias));
            }
        }
        out.push(("k_cont".to_string(), &mut self.k_cont));
        if let Some(l) = &mut self.l_cont {
            out.push(("l_cont".to_string(), l));
        }
        out.push(("log_delta".to_string(), &mut self.log_delta));
        out
    }

    /// Re-normalize the linear decoder's stored rows (the columns of the
    /// usual latent-to-state map) to unit Euclidean norm. No-op with a
    /// warning for MLP decoders; zero columns are left unchanged.
    pub fn normalize_decoder_columns(&mut self) {
        normalize_linear_rows(&mut self.decoder);
    }
}

fn normalize_linear_rows(decoder: &mut Decoder) {
    match decoder {
        Decoder::Linear { weight } => {
            let (n, d) = (weight.shape[0], weight.shape[1]);
            for r in 0..n {
                let row = &mut weight.data[r * d..(r + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    log::warn!("decoder column {r} is zero; normalization leaves it unchanged");
                } else {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
            }
        }
        Decoder::Mlp(_) => {
            log::warn!("column normalization applies to linear decoders only; skipping");
        }
    }
}

/// Bilinear (Tustin) transform of the continuous operators:
/// K_disc = (I - d/2 K)^-1 (I + d/2 K), L_disc = (I - d/2 K)^-1 d L,
/// both via one LU solve. The inverse is never formed.
pub fn discretize_bilinear(
    k_cont: &Mat,
    l_cont: Option<&Mat>,
    delta: f64,
) -> Result<DiscreteOperators, KoopmanError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(KoopmanError::Config(format!("delta must be positive, got {delta}")));
    }
    let n = k_cont.rows();
    let half = 0.5 * delta;
    let mut a = Mat::identity(n);
    let mut b = Mat::identity(n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= half * k_cont[(i, j)];
            b[(i, j)] += half * k_cont[(i, j)];
        }
    }
    let lu = match LuFactor::new(&a) {
        Ok(lu) => lu,
        Err(LinalgError::Singular { cond }) => return Err(KoopmanError::Discretization { cond }),
        Err(e) => return Err(KoopmanError::Grad(GradError::Solve(e))),
    };
    let k_disc = lu.solve(&b).map_err(grad_from_linalg)?;
    let l_disc = match l_cont {
        Some(l) => Some(lu.solve(&l.scale(delta)).map_err(grad_from_linalg)?),
        None => None,
    };
    if !k_disc.is_finite() || l_disc.as_ref().is_some_and(|l| !l.is_finite()) {
        return Err(KoopmanError::Discretization { cond: lu.cond_estimate() });
    }
    Ok(DiscreteOperators { k_disc, l_disc, delta })
}

fn grad_from_linalg(e: LinalgError) -> KoopmanError {
    KoopmanError::Grad(GradError::Solve(e))
}

/// One discrete latent step z' = K_disc z (+ L_disc v).
pub fn latent_step(
    ops: &DiscreteOperators,
    z: &[f64],
    v: Option<&[f64]>,
) -> Result<Vec<f64>, KoopmanError> {
    if z.len() != ops.k_disc.rows() {
        return Err(KoopmanError::LatentDim { expected: ops.k_disc.rows(), got: z.len() });
    }
    let mut out = ops.k_disc.matvec(z);
    match (&ops.l_disc, v) {
        (Some(l), Some(v)) => {
            let lv = l.matvec(v);
            for (o, c) in out.iter_mut().zip(&lv) {
                *o += c;
            }
        }
        (Some(_), None) => return Err(KoopmanError::MissingLatentControl),
        (None, Some(_)) => return Err(KoopmanError::UnexpectedLatentControl),
        (None, None) => {}
    }
    Ok(out)
}

/// Exact continuous flow z(t) = expm(K t) z0.
pub fn latent_flow_exact(k_cont: &Mat, z0: &[f64], t: f64) -> Vec<f64> {
    assert!(t >= 0.0, "latent flow runs forward in time");
    expm(&k_cont.scale(t)).matvec(z0)
}

// ---------------------------------------------------------------------------
// Differentiable path

pub struct KoopmanVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub action_encoder: Option<MlpVars>,
    pub latent_mlp: Option<MlpVars>,
    pub k_cont: Var,
    pub l_cont: Option<Var>,
    pub log_delta: Var,
}

/// Discrete operators on the tape, stored transposed so batch rows step by
/// right-multiplication.
pub struct TapeOps {
    pub k_disc_t: Var,
    pub l_disc_t: Option<Var>,
    pub delta: Var,
}

impl KoopmanParams {
    /// Leaf every parameter once; all applications must reuse these vars
    /// so gradients accumulate per parameter.
    pub fn vars(&self, tape: &mut Tape) -> KoopmanVars {
        KoopmanVars {
            encoder: self.encoder.vars(tape),
            decoder: self.decoder.vars(tape),
            action_encoder: self.action_encoder.as_ref().map(|m| m.vars(tape)),
            latent_mlp: self.latent_mlp.as_ref().map(|m| m.vars(tape)),
            k_cont: tape.leaf(self.k_cont.clone()),
            l_cont: self.l_cont.as_ref().map(|l| tape.leaf(l.clone())),
            log_delta: tape.leaf(self.log_delta.clone()),
        }
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &KoopmanVars,
        x: Var,
    ) -> Result<Var, GradError> {
        self.encoder.apply(tape, &vars.encoder, x)
    }

    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &KoopmanVars,
        z: Var,
    ) -> Result<Var, GradError> {
        self.decoder.apply(tape, &vars.decoder, z)
    }

    pub fn encode_action_on_tape(
        &self,
        tape: &mut Tape,
        vars: &KoopmanVars,
        u: Var,
    ) -> Result<Var, GradError> {
        let (mlp, mvars) = match (&self.action_encoder, &vars.action_encoder) {
            (Some(m), Some(v)) => (m, v),
            _ => unreachable!("action encoder applied on an uncontrolled model"),
        };
        mlp.apply(tape, mvars, u)
    }

    /// Differentiable bilinear transform; gradients flow into K, L, and
    /// log_delta (delta = exp(log_delta) stays on the tape).
    pub fn discretize_on_tape(
        &self,
        tape: &mut Tape,
        vars: &KoopmanVars,
    ) -> Result<TapeOps, GradError> {
        let n = self.latent_dim();
        let delta = tape.exp(vars.log_delta);
        let half = tape.scale(delta, 0.5);
        let k_eff = match self.k_structure {
            KStructure::Dense => vars.k_cont,
            KStructure::Diagonal => {
                let eye = Mat::identity(n);
                tape.mask(vars.k_cont, eye.data())?
            }
            KStructure::SkewSymmetric => {
                let kt = tape.transpose(vars.k_cont);
                let diff = tape.sub(vars.k_cont, kt)?;
                tape.scale(diff, 0.5)
            }
        };
        let hk = tape.mul_scalar(k_eff, half)?;
        let eye = tape.leaf(Tensor::from_mat(&Mat::identity(n)));
        let a = tape.sub(eye, hk)?;
        let b = tape.add(eye, hk)?;
        let k_disc = tape.solve(a, b)?;
        let k_disc_t = tape.transpose(k_disc);
        let l_disc_t = match vars.l_cont {
            Some(l) => {
                let ld = tape.mul_scalar(l, delta)?;
                let l_disc = tape.solve(a, ld)?;
                Some(tape.transpose(l_disc))
            }
            None => None,
        };
        Ok(TapeOps { k_disc_t, l_disc_t, delta })
    }

    /// One latent step for a batch of latent rows. Uses the nonlinear MLP
    /// when the ablation is active (no operators needed), the linear
    /// operators otherwise.
    pub fn latent_step_on_tape(
        &self,
        tape: &mut Tape,
        vars: &KoopmanVars,
        ops: Option<&TapeOps>,
        z: Var,
        v: Option<Var>,
    ) -> Result<Var, GradError> {
        if let (Some(mlp), Some(mvars)) = (&self.latent_mlp, &vars.latent_mlp) {
            return mlp.apply(tape, mvars, z);
        }
        let ops = ops.expect("linear latent step needs discrete operators");
        let stepped = tape.matmul(z, ops.k_disc_t)?;
        match (ops.l_disc_t, v) {
            (Some(lt), Some(v)) => {
                let ctrl = tape.matmul(v, lt)?;
                tape.add(stepped, ctrl)
            }
            _ => Ok(stepped),
        }
    }

    /// Per-parameter gradients in `param_entries` order; zeros for
    /// parameters off the gradient path.
    pub fn collect_grads(&self, vars: &KoopmanVars, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        let entries = self.param_entries();
        let var_list = self.var_entries(vars);
        debug_assert_eq!(entries.len(), var_list.len());
        entries
            .iter()
            .zip(var_list)
            .map(|((name, tensor), (vname, var))| {
                debug_assert_eq!(name, &vname);
                let g = grads
                    .get(var)
                    .map(|t| t.data.clone())
                    .unwrap_or_else(|| vec![0.0; tensor.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn var_entries(&self, vars: &KoopmanVars) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = Vec::new();
        if let EncoderVars::Mlp(m) = &vars.encoder {
            for (i, (w, b)) in m.layers.iter().enumerate() {
                out.push((format!("encoder.{i}.weight"), *w));
                out.push((format!("encoder.{i}.bias"), *b));
            }
        }
        match &vars.decoder {
            DecoderVars::Linear(w) => out.push(("decoder.weight".to_string(), *w)),
            DecoderVars::Mlp(m) => {
                for (i, (w, b)) in m.layers.iter().enumerate() {
                    out.push((format!("decoder.{i}.weight"), *w));
                    out.push((format!("decoder.{i}.bias"), *b));
                }
            }
        }
        if let Some(m) = &vars.action_encoder {
            for (i, (w, b)) in m.layers.iter().enumerate() {
                out.push((format!("action_encoder.{i}.weight"), *w));
                out.push((format!("action_encoder.{i}.bias"), *b));
            }
        }
        if let Some(m) = &vars.latent_mlp {
            for (i, (w, b)) in m.layers.iter().enumerate() {
                out.push((format!("latent_mlp.{i}.weight"), *w));
                out.push((format!("latent_mlp.{i}.bias"), *b));
            }
        }
        out.push(("k_cont".to_string(), vars.k_cont));
        if let Some(l) = vars.l_cont {
            out.push(("l_cont".to_string(), l));
        }
        out.push(("log_delta".to_string(), vars.log_delta));
        out
    }
}

// ---------------------------------------------------------------------------
// Persistence

pub fn save_model(
    path: &Path,
    params: &KoopmanParams,
    config: &ModelConfig,
) -> Result<(), KoopmanError> {
    let cfg_value = serde_json::to_value(config)
        .map_err(|e| KoopmanError::Checkpoint(format!("config serialization: {e}")))?;
    let entries: Vec<(String, &Tensor)> = params.param_entries();
    write_checkpoint(path, &cfg_value, &entries)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(KoopmanParams, ModelConfig), KoopmanError> {
    let ck = read_checkpoint(path)?;
    let config: ModelConfig = serde_json::from_value(ck.model_config)
        .map_err(|e| KoopmanError::Checkpoint(format!("config block: {e}")))?;
    // Shapes come from the config; stored tensors overwrite the fresh init.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = KoopmanParams::init(&config, &mut rng)?;
    let stored: std::collections::BTreeMap<String, Tensor> = ck.params.into_iter().collect();
    for (name, tensor) in params.param_entries_mut() {
        let src = stored
            .get(&name)
            .ok_or_else(|| KoopmanError::Checkpoint(format!("missing parameter {name}")))?;
        if src.shape != tensor.shape {
            return Err(KoopmanError::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                src.shape, tensor.shape
            )));
        }
        tensor.data.copy_from_slice(&src.data);
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::oracles::{parabolic_oracle, switching_oracle};
    use super::*;
    use crate::dynsys::parabolic_closed_form;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            state_dim: 2,
            latent_dim: 8,
            control_dim: 0,
            control_embedding: 0,
            action_hidden: vec![],
            encoder: EncoderConfig::Mlp { hidden: vec![16, 16] },
            decoder: DecoderConfig::Linear,
            k_structure: KStructure::Dense,
            init_delta: 0.01,
            nonlinear_latent: false,
        }
    }

    #[test]
    fn oracle_encoder_matches_augmented_state() {
        let (params, _) = parabolic_oracle(-0.1, -1.0, 0.01);
        let z = params.encode(&[0.5, -0.3]).unwrap();
        assert_eq!(z, vec![0.5, -0.3, 0.25]);
        let again = params.encode(&[0.5, -0.3]).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn oracle_decoder_selects_state_exactly() {
        let (params, _) = parabolic_oracle(-0.1, -1.0, 0.01);
        let z = params.encode(&[0.7, -0.3]).unwrap();
        let x = params.decode(&z).unwrap();
        assert_eq!(x, vec![0.7, -0.3]);
    }

    #[test]
    fn zero_weight_encoder_maps_to_zero() {
        let mut rng = seeded(1);
        let mut params = KoopmanParams::init(&small_config(), &mut rng).unwrap();
        if let Encoder::Mlp(m) = &mut params.encoder {
            for l in &mut m.layers {
                l.weight.data.iter_mut().for_each(|v| *v = 0.0);
                l.bias.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let z = params.encode(&[0.4, -0.9]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_latent_decodes_to_zero_under_linear_decoder() {
        let mut rng = seeded(2);
        let params = KoopmanParams::init(&small_config(), &mut rng).unwrap();
        let x = params.decode(&vec![0.0; 8]).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_dimension() {
        let mut rng = seeded(3);
        let params = KoopmanParams::init(&small_config(), &mut rng).unwrap();
        assert!(matches!(
            params.encode(&[1.0, 2.0, 3.0]),
            Err(KoopmanError::StateDim { expected: 2, got: 3 })
        ));
        assert!(matches!(
            params.decode(&[1.0, 2.0]),
            Err(KoopmanError::LatentDim { expected: 8, got: 2 })
        ));
    }

    #[test]
    fn zero_k_discretizes_to_identity() {
        let k = Mat::zeros(3, 3);
        let l = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let ops = discretize_bilinear(&k, Some(&l), 0.25).unwrap();
        assert_eq!(ops.k_disc.data(), Mat::identity(3).data());
        for i in 0..3 {
            assert_eq!(ops.l_disc.as_ref().unwrap()[(i, 0)], 0.25 * l[(i, 0)]);
        }
    }

    #[test]
    fn scalar_bilinear_matches_rational_value() {
        let k = Mat::from_vec(1, 1, vec![-1.0]);
        let ops = discretize_bilinear(&k, None, 0.01).unwrap();
        assert!((ops.k_disc[(0, 0)] - 0.995 / 1.005).abs() < 1e-15);
        assert!((ops.k_disc[(0, 0)] - 0.9900497512).abs() < 1e-10);
    }

    #[test]
    fn scalar_bilinear_is_second_order_accurate() {
        let k = Mat::from_vec(1, 1, vec![-1.0]);
        let ops = discretize_bilinear(&k, None, 0.01).unwrap();
        let gap = (ops.k_disc[(0, 0)] - (-0.01f64).exp()).abs();
        assert!(gap < 1e-7, "bilinear vs exponential gap {gap}");
    }

    #[test]
    fn singular_discretization_reports_condition_estimate() {
        // delta/2 * K = I makes (I - delta/2 K) exactly zero.
        let k = Mat::from_vec(2, 2, vec![200.0, 0.0, 0.0, 200.0]);
        match discretize_bilinear(&k, None, 0.01) {
            Err(KoopmanError::Discretization { cond }) => assert!(cond.is_infinite() || cond > 1e12),
            other => panic!("expected discretization error, got {other:?}"),
        }
    }

    #[test]
    fn latent_step_identity_and_zero_control() {
        let ops = DiscreteOperators { k_disc: Mat::identity(3), l_disc: None, delta: 0.01 };
        let z = vec![0.3, -0.7, 2.0];
        assert_eq!(latent_step(&ops, &z, None).unwrap(), z);

        let with_l = DiscreteOperators {
            k_disc: Mat::identity(3),
            l_disc: Some(Mat::from_vec(3, 2, vec![1.0; 6])),
            delta: 0.01,
        };
        assert_eq!(latent_step(&with_l, &z, Some(&[0.0, 0.0])).unwrap(), z);
        assert!(matches!(
            latent_step(&with_l, &z, None),
            Err(KoopmanError::MissingLatentControl)
        ));
        assert!(matches!(
            latent_step(&ops, &z, Some(&[1.0])),
            Err(KoopmanError::UnexpectedLatentControl)
        ));
    }

    #[test]
    fn oracle_exact_step_tracks_closed_form() {
        let (params, _) = parabolic_oracle(-0.1, -1.0, 0.01);
        let x0 = [0.9, 0.2];
        let z0 = params.encode(&x0).unwrap();
        let z1 = latent_flow_exact(&params.effective_k(), &z0, 0.01);
        let x1 = params.decode(&z1).unwrap();
        let exact = parabolic_closed_form(&x0, 0.01, -0.1, -1.0);
        for i in 0..2 {
            assert!((x1[i] - exact[i]).abs() < 1e-9, "coordinate {i}: {} vs {}", x1[i], exact[i]);
        }
    }

    #[test]
    fn exact_flow_at_zero_time_is_identity() {
        let k = Mat::from_vec(2, 2, vec![0.3, -1.0, 0.5, 0.1]);
        let z0 = vec![1.5, -2.5];
        assert_eq!(latent_flow_exact(&k, &z0, 0.0), z0);
    }

    #[test]
    fn exact_flow_rotates_by_quarter_turn() {
        let th = std::f64::consts::FRAC_PI_2;
        let k = Mat::from_vec(2, 2, vec![0.0, th, -th, 0.0]);
        let z = latent_flow_exact(&k, &[1.0, 0.0], 1.0);
        assert!(z[0].abs() < 1e-12 && (z[1] + 1.0).abs() < 1e-12, "got {z:?}");
    }

    #[test]
    fn exact_flow_on_diagonal_matches_scalar_decay() {
        let k = Mat::from_vec(2, 2, vec![-1.0, 0.0, 0.0, -2.0]);
        let z = latent_flow_exact(&k, &[1.0, 1.0], 1.0);
        assert!((z[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((z[1] - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn repeated_bilinear_steps_converge_at_second_order() {
        let mut rng = seeded(9);
        let n = 4;
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = if i == j { -1.0 } else { 0.3 * rng.gen_range(-1.0..1.0) };
            }
        }
        let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = 0.4;
        let exact = latent_flow_exact(&k, &z0, t);
        let endpoint_err = |delta: f64| {
            let ops = discretize_bilinear(&k, None, delta).unwrap();
            let mut z = z0.clone();
            for _ in 0..(t / delta).round() as usize {
                z = latent_step(&ops, &z, None).unwrap();
            }
            z.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let ratio = endpoint_err(0.04) / endpoint_err(0.02);
        assert!((3.0..=5.0).contains(&ratio), "second-order ratio {ratio}");
    }

    #[test]
    fn exponential_flow_satisfies_semigroup_property() {
        let mut rng = seeded(10);
        let n = 6;
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = if i == j { -0.8 } else { rng.gen_range(-0.5..0.5) };
            }
        }
        let (s, t) = (0.3, 0.5);
        let whole = expm(&k.scale(s + t));
        let parts = expm(&k.scale(s)).matmul(&expm(&k.scale(t)));
        assert!(whole.sub(&parts).max_abs() < 1e-10);
    }

    #[test]
    fn skew_flow_preserves_norm() {
        let mut rng = seeded(11);
        let n = 6;
        let mut p = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let k = p.sub(&p.transpose()).scale(0.5);
        let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = latent_flow_exact(&k, &z0, 2.0);
        let n0 = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-10, "norm drifted {}", (n0 - n1).abs());
    }

    #[test]
    fn decoder_jvp_of_linear_map_is_the_map() {
        let mut rng = seeded(12);
        let params = KoopmanParams::init(&small_config(), &mut rng).unwrap();
        let dz: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jvp = params.decoder_jvp(&vec![0.5; 8], &dz);
        let direct = params.decode(&dz).unwrap();
        for (a, b) in jvp.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
        let zero = params.decoder_jvp(&vec![0.5; 8], &vec![0.0; 8]);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_jvp_matches_finite_differences_on_mlp() {
        let mut cfg = small_config();
        cfg.decoder = DecoderConfig::Mlp { hidden: vec![16] };
        let mut rng = seeded(13);
        let params = KoopmanParams::init(&cfg, &mut rng).unwrap();
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dz: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jvp = params.decoder_jvp(&z, &dz);

        let h = 1e-6;
        let shift = |sign: f64| -> Vec<f64> {
            let zp: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + sign * h * d).collect();
            params.decode(&zp).unwrap()
        };
        let (up, down) = (shift(1.0), shift(-1.0));
        for i in 0..2 {
            let numeric = (up[i] - down[i]) / (2.0 * h);
            let denom = numeric.abs().max(jvp[i].abs()).max(1e-8);
            assert!(
                (numeric - jvp[i]).abs() / denom < 1e-5,
                "jvp[{i}] = {} vs numeric {numeric}",
                jvp[i]
            );
        }
    }

    #[test]
    fn column_normalization_examples() {
        let weight = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]);
        let mut dec = Decoder::Linear { weight };
        normalize_linear_rows(&mut dec);
        if let Decoder::Linear { weight } = &dec {
            assert_eq!(&weight.data[0..2], &[0.6, 0.8]);
            assert_eq!(&weight.data[2..4], &[0.0, 0.0]);
        }
        // already-unit column is untouched
        normalize_linear_rows(&mut dec);
        if let Decoder::Linear { weight } = &dec {
            assert_eq!(&weight.data[0..2], &[0.6, 0.8]);
        }
    }

    #[test]
    fn structure_projection_is_exact() {
        let mut cfg = small_config();
        cfg.k_structure = KStructure::SkewSymmetric;
        let mut rng = seeded(14);
        let mut params = KoopmanParams::init(&cfg, &mut rng).unwrap();
        for v in &mut params.k_cont.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        params.project_k_structure();
        let k = params.k_cont.to_mat();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(k[(i, j)], -k[(j, i)]);
            }
        }
        let before = params.k_cont.data.clone();
        params.project_k_structure();
        assert_eq!(before, params.k_cont.data);

        params.k_structure = KStructure::Diagonal;
        for v in &mut params.k_cont.data {
            *v = 1.0;
        }
        params.project_k_structure();
        let k = params.k_cont.to_mat();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(k[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_config();
        let mut rng = seeded(15);
        let params = KoopmanParams::init(&cfg, &mut rng).unwrap();
        save_model(&path, &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_model(&path).unwrap();
        assert_eq!(loaded_cfg.latent_dim, cfg.latent_dim);
        for ((n1, t1), (n2, t2)) in params.param_entries().iter().zip(loaded.param_entries()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.shape, t2.shape);
            for (a, b) in t1.data.iter().zip(&t2.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {n1} differs");
            }
        }
    }

    #[test]
    fn tape_forward_paths_match_plain_paths() {
        let mut cfg = small_config();
        cfg.control_dim = 1;
        cfg.control_embedding = 4;
        cfg.action_hidden = vec![8];
        let mut rng = seeded(16);
        let mut params = KoopmanParams::init(&cfg, &mut rng).unwrap();
        for v in &mut params.k_cont.data {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in &mut params.l_cont.as_mut().unwrap().data {
            *v = rng.gen_range(-0.5..0.5);
        }

        let x = Mat::from_vec(3, 2, vec![0.1, -0.4, 0.9, 0.2, -1.1, 0.7]);
        let u = Mat::from_vec(3, 1, vec![0.3, -0.2, 0.05]);
        let z_plain = params.encode_batch(&x).unwrap();
        let ops = params.discretize().unwrap();
        let v_plain = params.action_encoder.as_ref().unwrap().forward(&u);
        let mut z1_plain = Mat::zeros(3, 8);
        for r in 0..3 {
            let stepped =
                latent_step(&ops, z_plain.row(r), Some(v_plain.row(r))).unwrap();
            z1_plain.row_mut(r).copy_from_slice(&stepped);
        }
        let x1_plain = params.decode_batch(&z1_plain).unwrap();

        let mut tape = Tape::new();
        let vars = params.vars(&mut tape);
        let xv = tape.leaf(Tensor::from_mat(&x));
        let uv = tape.leaf(Tensor::from_mat(&u));
        let zv = params.encode_on_tape(&mut tape, &vars, xv).unwrap();
        let tops = params.discretize_on_tape(&mut tape, &vars).unwrap();
        let vv = params.encode_action_on_tape(&mut tape, &vars, uv).unwrap();
        let z1v = params.latent_step_on_tape(&mut tape, &vars, Some(&tops), zv, Some(vv)).unwrap();
        let x1v = params.decode_on_tape(&mut tape, &vars, z1v).unwrap();

        for (a, b) in tape.value(x1v).data.iter().zip(x1_plain.data()) {
            assert!((a - b).abs() < 1e-12, "tape {a} vs plain {b}");
        }
    }

    #[test]
    fn one_step_decoding_is_euler_consistent() {
        // psi(Kbar z) - psi(z) ~ delta * J_psi(z) K z for small delta;
        // the residual is second order, so halving delta quarters it.
        let mut rng = seeded(17);
        let mut params = KoopmanParams::init(&small_config(), &mut rng).unwrap();
        for v in &mut params.k_cont.data {
            *v = rng.gen_range(-0.6..0.6);
        }
        let x = [0.4, -0.8];
        let z = params.encode(&x).unwrap();
        let k = params.effective_k();
        let kz = k.matvec(&z);
        let base = params.decode(&z).unwrap();

        let residual = |delta: f64| -> f64 {
            let ops = discretize_bilinear(&k, None, delta).unwrap();
            let z1 = latent_step(&ops, &z, None).unwrap();
            let x1 = params.decode(&z1).unwrap();
            let drift = params.decoder_jvp(&z, &kz);
            (0..2)
                .map(|i| {
                    let r = x1[i] - base[i] - delta * drift[i];
                    r * r
                })
                .sum::<f64>()
                .sqrt()
        };
        let ratio = residual(1e-3) / residual(5e-4);
        assert!((3.0..=5.0).contains(&ratio), "Euler consistency ratio {ratio}");
    }

    #[test]
    fn config_validation_reports_every_violation() {
        let cfg = ModelConfig {
            state_dim: 3,
            latent_dim: 2,
            control_dim: 0,
            control_embedding: 0,
            action_hidden: vec![],
            encoder: EncoderConfig::Dictionary { features: vec![vec![(5, 1)]] },
            decoder: DecoderConfig::Linear,
            k_structure: KStructure::Dense,
            init_delta: -1.0,
            nonlinear_latent: false,
        };
        let errs = cfg.validate();
        assert!(errs.len() >= 3, "expected several violations, got {errs:?}");
        assert!(errs.iter().any(|e| e.contains("latent_dim")));
        assert!(errs.iter().any(|e| e.contains("init_delta")));
        assert!(errs.iter().any(|e| e.contains("feature")));
    }

    #[test]
    fn switching_oracle_encodes_by_region() {
        let k1 = Mat::from_vec(2, 2, vec![0.05, 0.0, 0.0, 0.0]);
        let k2 = Mat::from_vec(2, 2, vec![0.02, 0.0, 0.0, 0.0]);
        let (params, _) = switching_oracle(&k1, &k2, 1.0, 0.01);
        let left = params.encode(&[0.5, 2.0]).unwrap();
        assert_eq!(left, vec![0.5, 2.0, 0.0, 0.0]);
        let right = params.encode(&[1.5, -0.3]).unwrap();
        assert_eq!(right, vec![0.0, 0.0, 1.5, -0.3]);
        // decoder sums the two blocks, so either region decodes exactly
        assert_eq!(params.decode(&left).unwrap(), vec![0.5, 2.0]);
        assert_eq!(params.decode(&right).unwrap(), vec![1.5, -0.3]);
    }
}
