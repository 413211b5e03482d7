//! Dynamic mode decomposition baseline: a least-squares linear operator on
//! raw states, plus a fixed-dictionary lifted variant.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradengine::Monomial;
use crate::koopman::eval_monomials;
use crate::linalg::{lstsq_minnorm, LinalgError, LuFactor, Mat};
use crate::EXPLOSION_NORM;

#[derive(Debug, Error)]
pub enum DmdError {
    #[error("need at least one (x, x_next) pair")]
    EmptyDataset,
    #[error("pair matrices disagree: x is {x_rows}x{x_cols}, y is {y_rows}x{y_cols}")]
    PairShape { x_rows: usize, x_cols: usize, y_rows: usize, y_cols: usize },
    #[error("state has {got} entries, expected {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("rollout exploded at step {step}: state norm {norm:.3e}")]
    Explosion { step: usize, norm: f64 },
    #[error("fit produced non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Linear one-step model x_{t+1} = K x_t with its training residual
/// (root-mean-square over all residual entries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmdModel {
    pub k_dmd: Mat,
    pub fit_residual: f64,
}

/// DMD on monomial-lifted coordinates; `features` defines the lift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdmdModel {
    pub features: Vec<Monomial>,
    pub model: DmdModel,
}

fn check_pairs(x: &Mat, y: &Mat) -> Result<(), DmdError> {
    if x.rows() == 0 {
        return Err(DmdError::EmptyDataset);
    }
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(DmdError::PairShape {
            x_rows: x.rows(),
            x_cols: x.cols(),
            y_rows: y.rows(),
            y_cols: y.cols(),
        });
    }
    Ok(())
}

fn residual_rms(x: &Mat, y: &Mat, w: &Mat) -> f64 {
    let pred = x.matmul(w);
    let diff = y.sub(&pred);
    diff.norm_fro() / ((y.rows() * y.cols()) as f64).sqrt()
}

fn model_from_w(x: &Mat, y: &Mat, w: Mat) -> Result<DmdModel, DmdError> {
    if !w.is_finite() {
        return Err(DmdError::NonFinite);
    }
    let fit_residual = residual_rms(x, y, &w);
    Ok(DmdModel { k_dmd: w.transpose(), fit_residual })
}

/// Least-squares fit of x_{t+1} = K x_t over row-stacked pairs, via a
/// rank-revealing SVD; rank-deficient data yields the minimum-Frobenius-norm
/// solution.
pub fn fit_dmd(x: &Mat, y: &Mat) -> Result<DmdModel, DmdError> {
    check_pairs(x, y)?;
    let w = lstsq_minnorm(x, y)?;
    model_from_w(x, y, w)
}

/// The same fit through the normal equations (X^T X) W = X^T Y. Kept as an
/// independent route: on well-conditioned data it must agree with
/// [`fit_dmd`] to 1e-8, which guards both implementations.
pub fn fit_dmd_normal_eq(x: &Mat, y: &Mat) -> Result<DmdModel, DmdError> {
    check_pairs(x, y)?;
    let gram = x.matmul_tn(x);
    let rhs = x.matmul_tn(y);
    let w = LuFactor::new(&gram)?.solve(&rhs)?;
    model_from_w(x, y, w)
}

/// DMD on monomial-augmented coordinates. The caller's feature list fully
/// defines the lifted space (include degree-1 terms to keep raw state).
pub fn fit_edmd(x: &Mat, y: &Mat, features: &[Monomial]) -> Result<EdmdModel, DmdError> {
    check_pairs(x, y)?;
    let xl = eval_monomials(x, features);
    let yl = eval_monomials(y, features);
    let model = fit_dmd(&xl, &yl)?;
    Ok(EdmdModel { features: features.to_vec(), model })
}

/// Iterate x <- K x for `horizon` steps; row 0 is x0, so the result has
/// horizon + 1 rows. A state norm above the explosion threshold aborts
/// with the 1-based step index.
pub fn rollout_dmd(model: &DmdModel, x0: &[f64], horizon: usize) -> Result<Mat, DmdError> {
    let d = model.k_dmd.rows();
    if x0.len() != d {
        return Err(DmdError::StateDim { expected: d, got: x0.len() });
    }
    let mut out = Mat::zeros(horizon + 1, d);
    out.row_mut(0).copy_from_slice(x0);
    let mut x = x0.to_vec();
    for step in 1..=horizon {
        x = model.k_dmd.matvec(&x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > EXPLOSION_NORM {
            return Err(DmdError::Explosion { step, norm });
        }
        out.row_mut(step).copy_from_slice(&x);
    }
    Ok(out)
}

/// Split one trajectory (rows are consecutive states) into (x_t, x_{t+1})
/// pair matrices.
pub fn pairs_from_trajectory(states: &Mat) -> Result<(Mat, Mat), DmdError> {
    if states.rows() < 2 {
        return Err(DmdError::EmptyDataset);
    }
    let (n, d) = (states.rows(), states.cols());
    let mut x = Mat::zeros(n - 1, d);
    let mut y = Mat::zeros(n - 1, d);
    for i in 0..n - 1 {
        x.row_mut(i).copy_from_slice(states.row(i));
        y.row_mut(i).copy_from_slice(states.row(i + 1));
    }
    Ok((x, y))
}

/// Stack pairs from many trajectories.
pub fn pairs_from_trajectories(trajs: &[&Mat]) -> Result<(Mat, Mat), DmdError> {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut d = 0;
    let mut rows = 0;
    for t in trajs {
        let (x, y) = pairs_from_trajectory(t)?;
        d = x.cols();
        rows += x.rows();
        xs.extend_from_slice(x.data());
        ys.extend_from_slice(y.data());
    }
    if rows == 0 {
        return Err(DmdError::EmptyDataset);
    }
    Ok((Mat::from_vec(rows, d, xs), Mat::from_vec(rows, d, ys)))
}

pub fn save_dmd(path: &Path, model: &DmdModel) -> Result<(), std::io::Error> {
    let mut text = serde_json::to_string_pretty(model)?;
    text.push('\n');
    std::fs::write(path, text)
}

pub fn load_dmd(path: &Path) -> Result<DmdModel, std::io::Error> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynsys::parabolic_closed_form;

    fn linear_pairs(a: &Mat, n: usize, seed: u64) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = a.rows();
        let mut x = Mat::zeros(n, d);
        let mut y = Mat::zeros(n, d);
        for i in 0..n {
            let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let yi = a.matvec(&xi);
            x.row_mut(i).copy_from_slice(&xi);
            y.row_mut(i).copy_from_slice(&yi);
        }
        (x, y)
    }

    #[test]
    fn exact_linear_data_recovers_the_operator() {
        let a = Mat::from_vec(2, 2, vec![0.9, 0.0, 0.0, 0.8]);
        let (x, y) = linear_pairs(&a, 10, 1);
        let model = fit_dmd(&x, &y).unwrap();
        assert!(model.k_dmd.sub(&a).max_abs() < 1e-10);
        assert!(model.fit_residual < 1e-12);
    }

    #[test]
    fn single_scalar_pair_gives_the_ratio() {
        let x = Mat::from_vec(1, 1, vec![1.0]);
        let y = Mat::from_vec(1, 1, vec![2.0]);
        let model = fit_dmd(&x, &y).unwrap();
        assert!((model.k_dmd[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let empty = Mat::zeros(0, 2);
        assert!(matches!(fit_dmd(&empty, &empty), Err(DmdError::EmptyDataset)));
        let x = Mat::zeros(3, 2);
        let y = Mat::zeros(4, 2);
        assert!(matches!(fit_dmd(&x, &y), Err(DmdError::PairShape { .. })));
    }

    #[test]
    fn both_fit_routes_agree_on_well_conditioned_data() {
        let a = Mat::from_vec(3, 3, vec![0.9, 0.1, 0.0, -0.2, 0.7, 0.05, 0.0, 0.1, 0.85]);
        let (x, mut y) = linear_pairs(&a, 500, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in y.data_mut() {
            *v += 0.01 * rng.gen_range(-1.0..1.0);
        }
        let svd_route = fit_dmd(&x, &y).unwrap();
        let lu_route = fit_dmd_normal_eq(&x, &y).unwrap();
        let gap = svd_route.k_dmd.sub(&lu_route.k_dmd).max_abs();
        assert!(gap < 1e-8, "routes disagree by {gap}");
    }

    #[test]
    fn rank_deficient_fit_returns_minimum_norm_solution() {
        // all samples on the x-axis: the second column of W is unconstrained,
        // and the minimum-norm solution sets it to zero.
        let x = Mat::from_vec(4, 2, vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.5, 0.0]);
        let mut y = Mat::zeros(4, 2);
        for i in 0..4 {
            y[(i, 0)] = 0.5 * x[(i, 0)];
        }
        let model = fit_dmd(&x, &y).unwrap();
        assert!((model.k_dmd[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(model.k_dmd[(0, 1)].abs() < 1e-12);
        assert!(model.k_dmd[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn lifted_coordinates_make_parabolic_data_exactly_linear() {
        // raw states follow a nonlinear one-step map, so plain DMD keeps a
        // visible residual; lifting with (x1, x2, x1^2) linearizes it.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mu, lambda, dt) = (-0.1, -1.0, 0.5);
        let n = 200;
        let mut x = Mat::zeros(n, 2);
        let mut y = Mat::zeros(n, 2);
        for i in 0..n {
            let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let yi = parabolic_closed_form(&xi, dt, mu, lambda);
            x.row_mut(i).copy_from_slice(&xi);
            y.row_mut(i).copy_from_slice(&yi);
        }
        let raw = fit_dmd(&x, &y).unwrap();
        let features: Vec<Monomial> = vec![vec![(0, 1)], vec![(1, 1)], vec![(0, 2)]];
        let lifted = fit_edmd(&x, &y, &features).unwrap();
        assert!(raw.fit_residual > 1e-3, "raw residual {}", raw.fit_residual);
        assert!(lifted.model.fit_residual < 1e-8, "lifted residual {}", lifted.model.fit_residual);
    }

    #[test]
    fn identity_operator_rolls_out_constant() {
        let model = DmdModel { k_dmd: Mat::identity(2), fit_residual: 0.0 };
        let traj = rollout_dmd(&model, &[0.3, -0.4], 5).unwrap();
        for i in 0..=5 {
            assert_eq!(traj.row(i), &[0.3, -0.4]);
        }
    }

    #[test]
    fn exact_fit_tracks_ground_truth_over_long_horizon() {
        let a = Mat::from_vec(2, 2, vec![0.9, 0.0, 0.0, 0.8]);
        let (x, y) = linear_pairs(&a, 10, 5);
        let model = fit_dmd(&x, &y).unwrap();
        let x0 = [1.0, -1.0];
        let traj = rollout_dmd(&model, &x0, 100).unwrap();
        let mut truth = x0.to_vec();
        for step in 1..=100 {
            truth = a.matvec(&truth);
            for j in 0..2 {
                assert!((traj[(step, j)] - truth[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn unstable_operator_raises_explosion() {
        let model = DmdModel { k_dmd: Mat::from_vec(1, 1, vec![2.0]), fit_residual: 0.0 };
        match rollout_dmd(&model, &[1.0], 1000) {
            Err(DmdError::Explosion { step, norm }) => {
                assert!(norm > EXPLOSION_NORM);
                assert!((26..=28).contains(&step), "2^{step} first exceeds 1e8");
            }
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn pairs_split_respects_adjacency() {
        let traj = Mat::from_vec(3, 1, vec![1.0, 2.0, 4.0]);
        let (x, y) = pairs_from_trajectory(&traj).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
        assert_eq!(y.data(), &[2.0, 4.0]);
        let (xs, ys) = pairs_from_trajectories(&[&traj, &traj]).unwrap();
        assert_eq!(xs.rows(), 4);
        assert_eq!(ys.rows(), 4);
    }

    #[test]
    fn json_roundtrip_preserves_the_operator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dmd.json");
        let model = DmdModel {
            k_dmd: Mat::from_vec(2, 2, vec![0.9, 0.1, -0.2, 0.8]),
            fit_residual: 0.0125,
        };
        save_dmd(&path, &model).unwrap();
        let loaded = load_dmd(&path).unwrap();
        assert_eq!(loaded.k_dmd.data(), model.k_dmd.data());
        assert_eq!(loaded.fit_residual, model.fit_residual);
    }
}
