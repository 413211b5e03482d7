//! Dense row-major matrices with the factorizations the rest of the crate
//! needs: partial-pivot LU, scaling-and-squaring matrix exponential, and a
//! one-sided Jacobi SVD for minimum-norm least squares.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular to working precision (condition estimate {cond:.3e})")]
    Singular { cond: f64 },
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut best = 0.0f64;
        for j in 0..self.cols {
            let mut s = 0.0;
            for i in 0..self.rows {
                s += self[(i, j)].abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul: {}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols);
        let mut out = Mat::zeros(self.rows, rhs.cols);
        matmul_into(&mut out, self, rhs);
        out
    }

    /// `self * rhs^T`
    pub fn matmul_nt(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_nt: inner dims differ");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                let mut s = 0.0;
                for l in 0..self.cols {
                    s += a[l] * b[l];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// `self^T * rhs`
    pub fn matmul_tn(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.rows, rhs.rows, "matmul_tn: inner dims differ");
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for l in 0..self.rows {
            let a = self.row(l);
            for i in 0..self.cols {
                let ai = a[i];
                if ai == 0.0 {
                    continue;
                }
                let g = rhs.row(l);
                let o = out.row_mut(i);
                for j in 0..g.len() {
                    o[j] += ai * g[j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: {}x{} * len {}", self.rows, self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut s = 0.0;
            for j in 0..row.len() {
                s += row[j] * x[j];
            }
            out[i] = s;
        }
        out
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `out += a * b`, ikj order so the inner loop runs over contiguous rows.
pub fn matmul_into(out: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    for i in 0..a.rows {
        let arow = a.row(i);
        for l in 0..a.cols {
            let av = arow[l];
            if av == 0.0 {
                continue;
            }
            let brow = b.row(l);
            let orow = out.row_mut(i);
            for j in 0..brow.len() {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Partial-pivot LU factorization, `P A = L U`.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: Mat,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: &Mat) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "LU requires a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                perm.swap(k, p);
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
            }
            let piv = lu[(k, k)];
            if piv == 0.0 || !piv.is_finite() {
                return Err(LinalgError::Singular { cond: f64::INFINITY });
            }
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(LuFactor { lu, perm })
    }

    pub fn n(&self) -> usize {
        self.lu.rows
    }

    /// Ratio of the largest to smallest pivot magnitude; a cheap conditioning proxy.
    pub fn cond_estimate(&self) -> f64 {
        let n = self.n();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let v = self.lu[(i, i)].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Solve `A X = B` for a matrix right-hand side.
    pub fn solve(&self, b: &Mat) -> Result<Mat, LinalgError> {
        let n = self.n();
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "solve: rhs has {} rows, expected {}",
                b.rows, n
            )));
        }
        let k = b.cols;
        let mut x = Mat::zeros(n, k);
        for i in 0..n {
            let src = b.row(self.perm[i]).to_vec();
            x.row_mut(i).copy_from_slice(&src);
        }
        // forward substitution with unit-lower L
        for i in 0..n {
            for l in 0..i {
                let f = self.lu[(i, l)];
                if f != 0.0 {
                    let (top, bot) = x.data.split_at_mut(i * k);
                    let xl = &top[l * k..(l + 1) * k];
                    let xi = &mut bot[..k];
                    for j in 0..k {
                        xi[j] -= f * xl[j];
                    }
                }
            }
        }
        // back substitution with U
        for i in (0..n).rev() {
            for l in i + 1..n {
                let f = self.lu[(i, l)];
                if f != 0.0 {
                    let (top, bot) = x.data.split_at_mut(l * k);
                    let xi = &mut top[i * k..(i + 1) * k];
                    let xl = &bot[..k];
                    for j in 0..k {
                        xi[j] -= f * xl[j];
                    }
                }
            }
            let piv = self.lu[(i, i)];
            for j in 0..k {
                x[(i, j)] /= piv;
            }
        }
        Ok(x)
    }

    /// Solve `A^T X = B` using the factorization of `A`.
    pub fn solve_transposed(&self, b: &Mat) -> Result<Mat, LinalgError> {
        let n = self.n();
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "solve_transposed: rhs has {} rows, expected {}",
                b.rows, n
            )));
        }
        let k = b.cols;
        // A^T = U^T L^T P, so solve U^T y = b, then L^T w = y, then x = P^T w.
        let mut y = b.clone();
        for i in 0..n {
            let piv = self.lu[(i, i)];
            for j in 0..k {
                y[(i, j)] /= piv;
            }
            for l in i + 1..n {
                let f = self.lu[(i, l)];
                if f != 0.0 {
                    let (top, bot) = y.data.split_at_mut(l * k);
                    let yi = &top[i * k..(i + 1) * k];
                    let yl = &mut bot[..k];
                    for j in 0..k {
                        yl[j] -= f * yi[j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for l in 0..i {
                let f = self.lu[(i, l)];
                if f != 0.0 {
                    let (top, bot) = y.data.split_at_mut(i * k);
                    let yl = &mut top[l * k..(l + 1) * k];
                    let yi = &bot[..k];
                    for j in 0..k {
                        yl[j] -= f * yi[j];
                    }
                }
            }
        }
        let mut x = Mat::zeros(n, k);
        for i in 0..n {
            let src = y.row(i).to_vec();
            x.row_mut(self.perm[i]).copy_from_slice(&src);
        }
        Ok(x)
    }
}

const EXPM_THETA_13: f64 = 5.371920351148152;

const EXPM_PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential via degree-13 Padé approximation with scaling and squaring.
pub fn expm(a: &Mat) -> Mat {
    assert_eq!(a.rows, a.cols, "expm requires a square matrix");
    let n = a.rows;
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let norm = a.norm_one();
    let s = if norm > EXPM_THETA_13 {
        (norm / EXPM_THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let a = a.scale(0.5f64.powi(s as i32));
    let b = &EXPM_PADE_13;
    let ident = Mat::identity(n);
    let a2 = a.matmul(&a);
    let a4 = a2.matmul(&a2);
    let a6 = a2.matmul(&a4);

    let w1 = a6.scale(b[13]).add(&a4.scale(b[11])).add(&a2.scale(b[9]));
    let w2 = a6.scale(b[7]).add(&a4.scale(b[5])).add(&a2.scale(b[3])).add(&ident.scale(b[1]));
    let u = a.matmul(&a6.matmul(&w1).add(&w2));

    let z1 = a6.scale(b[12]).add(&a4.scale(b[10])).add(&a2.scale(b[8]));
    let v = a6.matmul(&z1).add(&a6.scale(b[6])).add(&a4.scale(b[4])).add(&a2.scale(b[2])).add(&ident.scale(b[0]));

    let vm_u = v.sub(&u);
    let vp_u = v.add(&u);
    let lu = LuFactor::new(&vm_u).expect("expm: V - U singular");
    let mut r = lu.solve(&vp_u).expect("expm: solve failed");
    for _ in 0..s {
        r = r.matmul(&r);
    }
    r
}

/// Thin SVD `A = U diag(sigma) V^T` by one-sided Jacobi. Intended for tall
/// matrices with few columns; `U` is `m x n`, `sigma` descending.
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

pub fn svd_jacobi(a: &Mat) -> Svd {
    let m = a.rows;
    let n = a.cols;
    let mut g = a.clone();
    let mut v = Mat::identity(n);
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let gp = g[(i, p)];
                    let gq = g[(i, q)];
                    app += gp * gp;
                    aqq += gq * gq;
                    apq += gp * gq;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                let theta = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (sn, cs) = theta.sin_cos();
                for i in 0..m {
                    let gp = g[(i, p)];
                    let gq = g[(i, q)];
                    g[(i, p)] = cs * gp + sn * gq;
                    g[(i, q)] = -sn * gp + cs * gq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = cs * vp + sn * vq;
                    v[(i, q)] = -sn * vp + cs * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sigma = vec![0.0; n];
    let mut u = Mat::zeros(m, n);
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            s += g[(i, j)] * g[(i, j)];
        }
        let s = s.sqrt();
        sigma[j] = s;
        if s > 0.0 {
            for i in 0..m {
                u[(i, j)] = g[(i, j)] / s;
            }
        }
    }
    // sort descending
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut su = Mat::zeros(m, n);
    let mut sv = Mat::zeros(n, n);
    let mut ss = vec![0.0; n];
    for (newj, &oldj) in order.iter().enumerate() {
        ss[newj] = sigma[oldj];
        for i in 0..m {
            su[(i, newj)] = u[(i, oldj)];
        }
        for i in 0..n {
            sv[(i, newj)] = v[(i, oldj)];
        }
    }
    Svd { u: su, sigma: ss, v: sv }
}

/// Minimum-norm least-squares solution of `A X = B` via the Jacobi SVD.
/// Singular values below `max(m,n) * eps * sigma_max` are treated as zero.
pub fn lstsq_minnorm(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "lstsq: A has {} rows, B has {}",
            a.rows, b.rows
        )));
    }
    let svd = svd_jacobi(a);
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let tol = (a.rows.max(a.cols) as f64) * f64::EPSILON * smax;
    // X = V * diag(1/sigma) * U^T * B
    let utb = svd.u.matmul_tn(b);
    let mut scaled = utb;
    for (i, &s) in svd.sigma.iter().enumerate() {
        let inv = if s > tol { 1.0 / s } else { 0.0 };
        for j in 0..scaled.cols() {
            scaled[(i, j)] *= inv;
        }
    }
    Ok(svd.v.matmul(&scaled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                assert!(
                    (a[(i, j)] - b[(i, j)]).abs() <= tol,
                    "({i},{j}): {} vs {}",
                    a[(i, j)],
                    b[(i, j)]
                );
            }
        }
    }

    #[test]
    fn lu_solves_known_system() {
        let a = Mat::from_rows(&[vec![4.0, 3.0], vec![6.0, 3.0]]);
        let b = Mat::from_rows(&[vec![10.0], vec![12.0]]);
        let lu = LuFactor::new(&a).unwrap();
        let x = lu.solve(&b).unwrap();
        // 4x + 3y = 10, 6x + 3y = 12 -> x = 1, y = 2
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lu_transposed_solve_matches_explicit_transpose() {
        let a = Mat::from_rows(&[
            vec![2.0, -1.0, 0.5],
            vec![0.3, 3.0, -0.7],
            vec![-1.1, 0.2, 1.9],
        ]);
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, -1.0]]);
        let lu_a = LuFactor::new(&a).unwrap();
        let xt = lu_a.solve_transposed(&b).unwrap();
        let lu_at = LuFactor::new(&a.transpose()).unwrap();
        let expect = lu_at.solve(&b).unwrap();
        assert_close(&xt, &expect, 1e-12);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(LuFactor::new(&a).is_err() || LuFactor::new(&a).unwrap().cond_estimate() > 1e12);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&Mat::zeros(4, 4));
        assert_close(&e, &Mat::identity(4), 1e-15);
    }

    #[test]
    fn expm_diagonal_matches_scalar_exponentials() {
        let mut a = Mat::zeros(3, 3);
        a[(0, 0)] = -1.0;
        a[(1, 1)] = -2.0;
        a[(2, 2)] = 0.5;
        let e = expm(&a);
        for (i, lam) in [-1.0f64, -2.0, 0.5].iter().enumerate() {
            assert!((e[(i, i)] - lam.exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn expm_rotation_closed_form() {
        // K = [[0, th], [-th, 0]] => e^K = [[cos, sin], [-sin, cos]]
        let th = std::f64::consts::FRAC_PI_2;
        let a = Mat::from_rows(&[vec![0.0, th], vec![-th, 0.0]]);
        let e = expm(&a);
        let want = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert_close(&e, &want, 1e-12);
    }

    #[test]
    fn expm_handles_large_norms_via_squaring() {
        let mut a = Mat::zeros(2, 2);
        a[(0, 0)] = -30.0;
        a[(1, 1)] = 2.0;
        let e = expm(&a);
        assert!((e[(0, 0)] - (-30.0f64).exp()).abs() < 1e-18);
        assert!((e[(1, 1)] - 2.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs_and_orders() {
        let a = Mat::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ]);
        let svd = svd_jacobi(&a);
        assert!(svd.sigma[0] >= svd.sigma[1]);
        // reconstruct
        let mut us = svd.u.clone();
        for j in 0..2 {
            for i in 0..4 {
                us[(i, j)] *= svd.sigma[j];
            }
        }
        let recon = us.matmul_nt(&svd.v);
        assert_close(&recon, &a, 1e-12);
    }

    #[test]
    fn lstsq_minnorm_on_rank_deficient_system() {
        // A = [[1, 1]], b = [2]; min-norm solution is (1, 1).
        let a = Mat::from_rows(&[vec![1.0, 1.0]]);
        let b = Mat::from_rows(&[vec![2.0]]);
        let x = lstsq_minnorm(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Mat::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]);
        let c = a.matmul(&b);
        let c_nt = a.matmul_nt(&b.transpose());
        let c_tn = a.transpose().matmul_tn(&b); // (A^T)^T * B = A * B
        assert_close(&c, &c_nt, 1e-13);
        assert_close(&c, &c_tn, 1e-13);
    }
}
