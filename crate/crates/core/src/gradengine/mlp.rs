use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

use super::{GradError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer. The weight is stored input-major (in x out)
/// so a batch forward is `X * W + b` with no transpose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Multilayer perceptron; the activation is applied after every layer
/// except the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Linear>,
}

/// Tape handles for one MLP's parameters. Leaf each parameter exactly once
/// per tape so gradient contributions from repeated applications accumulate
/// on a single node.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// Kaiming-uniform init for layers feeding the activation, and the
    /// tighter 1/sqrt(fan_in) uniform for the final linear layer. Biases
    /// start at zero.
    pub fn init(config: MlpConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.output_dim);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == n_layers - 1;
            let bound = if last || config.activation == Activation::Identity {
                1.0 / (fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let mut w = Tensor::zeros(&[fan_in, fan_out]);
            for v in &mut w.data {
                *v = rng.gen_range(-bound..bound);
            }
            w.requires_grad = true;
            let mut b = Tensor::zeros(&[fan_out]);
            b.requires_grad = true;
            layers.push(Linear { weight: w, bias: b });
        }
        Mlp { config, layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Plain forward on a batch of row vectors.
    pub fn forward(&self, x: &Mat) -> Mat {
        let mut h = x.clone();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.weight.to_mat();
            let mut out = h.matmul(&w);
            let c = out.cols();
            for row in out.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(&layer.bias.data) {
                    *v += b;
                }
            }
            if l + 1 < n_layers && self.config.activation == Activation::Relu {
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = out;
        }
        h
    }

    /// Forward on a single state vector.
    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let m = Mat::from_vec(1, x.len(), x.to_vec());
        self.forward(&m).data().to_vec()
    }

    /// Register parameters on a tape once; reuse the result across
    /// every application in the same graph.
    pub fn vars(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        MlpVars { layers }
    }

    /// Differentiable forward using previously leafed parameters.
    pub fn apply(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, GradError> {
        let mut h = x;
        let n_layers = vars.layers.len();
        for (l, (w, b)) in vars.layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row_broadcast(h, *b)?;
            if l + 1 < n_layers && self.config.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
