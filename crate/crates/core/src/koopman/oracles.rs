//! Analytically exact models for systems whose latent-linear embedding is
//! known in closed form. These bypass training entirely and anchor the
//! numerical tests: any pipeline bug shows up against them.

use super::{Decoder, DecoderConfig, Encoder, EncoderConfig, KStructure, KoopmanParams, ModelConfig};
use crate::gradengine::Tensor;
use crate::linalg::Mat;

/// Exact 3-dimensional embedding of the parabolic-attractor system
///   x1' = mu x1,  x2' = lambda (x2 - x1^2).
/// The latent coordinates (x1, x2, x1^2) evolve linearly under
///   K = [[mu, 0, 0], [0, lambda, -lambda], [0, 0, 2 mu]]
/// and the decoder reads back the first two coordinates.
pub fn parabolic_oracle(mu: f64, lambda: f64, init_delta: f64) -> (KoopmanParams, ModelConfig) {
    let features: Vec<Vec<(usize, u32)>> = vec![vec![(0, 1)], vec![(1, 1)], vec![(0, 2)]];
    let config = ModelConfig {
        state_dim: 2,
        latent_dim: 3,
        control_dim: 0,
        control_embedding: 0,
        action_hidden: vec![],
        encoder: EncoderConfig::Dictionary { features: features.clone() },
        decoder: DecoderConfig::Linear,
        k_structure: KStructure::Dense,
        init_delta,
        nonlinear_latent: false,
    };
    let k = Mat::from_vec(
        3,
        3,
        vec![
            mu, 0.0, 0.0, //
            0.0, lambda, -lambda, //
            0.0, 0.0, 2.0 * mu,
        ],
    );
    // stored latent-major: rows are the columns of the 2x3 selector
    let weight = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let params = KoopmanParams {
        encoder: Encoder::Dictionary { features, input_dim: 2 },
        decoder: Decoder::Linear { weight },
        action_encoder: None,
        latent_mlp: None,
        k_cont: Tensor::from_mat(&k),
        l_cont: None,
        log_delta: Tensor::scalar(init_delta.ln()),
        k_structure: KStructure::Dense,
    };
    (params, config)
}

/// Switching-dynamics model: the plane splits at x1 = threshold into two
/// regions, each governed by its own 2x2 generator. The encoder writes the
/// state into the latent block for its region (a sparse code with disjoint
/// supports), K is block diagonal diag(k1, k2), and the decoder sums the
/// blocks. Without reencoding the support can never switch; with
/// reencoding it switches exactly when the decoded state crosses the
/// boundary.
pub fn switching_oracle(
    k1: &Mat,
    k2: &Mat,
    threshold: f64,
    init_delta: f64,
) -> (KoopmanParams, ModelConfig) {
    assert!(k1.rows() == 2 && k1.cols() == 2 && k2.rows() == 2 && k2.cols() == 2);
    let config = ModelConfig {
        state_dim: 2,
        latent_dim: 4,
        control_dim: 0,
        control_embedding: 0,
        action_hidden: vec![],
        encoder: EncoderConfig::Switching { coord: 0, threshold },
        decoder: DecoderConfig::Linear,
        k_structure: KStructure::Dense,
        init_delta,
        nonlinear_latent: false,
    };
    let mut k = Mat::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            k[(i, j)] = k1[(i, j)];
            k[(2 + i, 2 + j)] = k2[(i, j)];
        }
    }
    let weight = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let params = KoopmanParams {
        encoder: Encoder::Switching { coord: 0, threshold, input_dim: 2 },
        decoder: Decoder::Linear { weight },
        action_encoder: None,
        latent_mlp: None,
        k_cont: Tensor::from_mat(&k),
        l_cont: None,
        log_delta: Tensor::scalar(init_delta.ln()),
        k_structure: KStructure::Dense,
    };
    (params, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabolic_generator_closes_on_the_dictionary() {
        // d/dt (x1^2) = 2 x1 x1' = 2 mu x1^2: the third latent coordinate
        // must follow from the first via the generator, no truncation.
        let (params, _) = parabolic_oracle(-0.1, -1.0, 0.01);
        let k = params.k_cont.to_mat();
        let x = [0.8, -0.4];
        let z = params.encode(&x).unwrap();
        let zdot = k.matvec(&z);
        let mu = -0.1;
        let lambda = -1.0;
        let xdot = [mu * x[0], lambda * (x[1] - x[0] * x[0])];
        assert!((zdot[0] - xdot[0]).abs() < 1e-15);
        assert!((zdot[1] - xdot[1]).abs() < 1e-15);
        assert!((zdot[2] - 2.0 * x[0] * xdot[0]).abs() < 1e-15);
    }

    #[test]
    fn switching_blocks_are_disjoint() {
        let k1 = Mat::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.0]);
        let k2 = Mat::from_vec(2, 2, vec![-0.3, 0.1, 0.0, -0.2]);
        let (params, _) = switching_oracle(&k1, &k2, 1.0, 0.01);
        let k = params.k_cont.to_mat();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(k[(i, j)], k1[(i, j)]);
                assert_eq!(k[(2 + i, 2 + j)], k2[(i, j)]);
                assert_eq!(k[(i, 2 + j)], 0.0);
                assert_eq!(k[(2 + i, j)], 0.0);
            }
        }
    }
}
