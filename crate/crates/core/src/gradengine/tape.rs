use crate::linalg::{LuFactor, Mat};

use super::{GradError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One monomial feature: product of `x[i]^p` over the listed (i, p) pairs.
pub type Monomial = Vec<(usize, u32)>;

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    AddRowBroadcast { a: usize, bias: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MulScalar { a: usize, s: usize },
    Relu { a: usize },
    Exp { a: usize },
    Mse { a: usize, b: usize },
    L1 { a: usize },
    SumRowNorms { a: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { a: usize, start: usize, len: usize },
    Solve { a: usize, b: usize, lu: Box<LuFactor> },
    Monomials { a: usize, feats: Vec<Monomial> },
    RegionSelect { a: usize, coord: usize, threshold: f64 },
    AddScaled { a: usize, b: usize, c: f64 },
    Mask { a: usize, mask: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of the forward pass. Node indices are already in
/// topological order, so the backward sweep is a single reverse scan.
/// A tape may be reused for several `backward` calls; gradients are
/// recomputed from scratch each time.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a node, materializing zeros if it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.by_node[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad,
            _ => self.parents(&op).iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::AddRowBroadcast { a, bias: b }
            | Op::Sub { a, b }
            | Op::Mse { a, b }
            | Op::ConcatCols { a, b }
            | Op::Solve { a, b, .. }
            | Op::MulScalar { a, s: b }
            | Op::AddScaled { a, b, .. } => vec![*a, *b],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Exp { a }
            | Op::L1 { a }
            | Op::SumRowNorms { a }
            | Op::SliceCols { a, .. }
            | Op::Monomials { a, .. }
            | Op::RegionSelect { a, .. }
            | Op::Mask { a, .. } => vec![*a],
        }
    }

    /// Insert a constant or parameter tensor. `tensor.requires_grad`
    /// decides whether gradients are tracked through it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        if ac != br {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let out = self.value(a).to_mat().matmul(&self.value(b).to_mat());
        let mut t = Tensor::from_mat(&out);
        if self.value(a).shape.len() == 1 && ar == 1 {
            // vector * matrix keeps rank 1
            t.shape = vec![bc];
        }
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = Tensor::from_mat(&self.value(a).to_mat().transpose());
        self.push(Op::Transpose { a: a.0 }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, data))
    }

    /// `a + c * b`, fused.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var, GradError> {
        self.same_shape("add_scaled", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + c * y);
        Ok(self.push(Op::AddScaled { a: a.0, b: b.0, c }, data))
    }

    /// Matrix (r x c) plus a length-c bias added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var, GradError> {
        let (_, ac) = self.value(a).dims2();
        let blen = self.value(bias).len();
        if ac != blen {
            return Err(GradError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let mut out = self.value(a).clone();
        let bias_data = self.value(bias).data.clone();
        for row in out.data.chunks_mut(ac) {
            for (v, b) in row.iter_mut().zip(&bias_data) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a: a.0, bias: bias.0 }, out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(Op::Scale { a: a.0, c }, out)
    }

    /// Multiply tensor `a` by scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, GradError> {
        if !self.value(s).is_scalar() {
            return Err(GradError::InvalidArgument {
                op: "mul_scalar",
                expected: "a scalar multiplier",
                got: self.value(s).shape.clone(),
            });
        }
        let sv = self.value(s).scalar_value();
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= sv;
        }
        Ok(self.push(Op::MulScalar { a: a.0, s: s.0 }, out))
    }

    /// Elementwise product with a constant mask of the same size.
    pub fn mask(&mut self, a: Var, mask: &[f64]) -> Result<Var, GradError> {
        if self.value(a).len() != mask.len() {
            return Err(GradError::InvalidArgument {
                op: "mask",
                expected: "a mask matching the input size",
                got: vec![mask.len()],
            });
        }
        let mut out = self.value(a).clone();
        for (v, m) in out.data.iter_mut().zip(mask) {
            *v *= m;
        }
        Ok(self.push(Op::Mask { a: a.0, mask: mask.to_vec() }, out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { a: a.0 }, out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.exp();
        }
        self.push(Op::Exp { a: a.0 }, out)
    }

    /// Mean squared error over all entries; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse { a: a.0, b: b.0 }, Tensor::scalar(s / n)))
    }

    /// Sum of absolute values; scalar output.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().map(|v| v.abs()).sum();
        self.push(Op::L1 { a: a.0 }, Tensor::scalar(s))
    }

    /// Sum of Euclidean norms of the rows; a vector counts as one row.
    pub fn sum_row_norms(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let mut s = 0.0;
        for i in 0..r {
            let row = &self.value(a).data[i * c..(i + 1) * c];
            s += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        self.push(Op::SumRowNorms { a: a.0 }, Tensor::scalar(s))
    }

    /// Concatenate two matrices side by side (same row count).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        if ar != br {
            return Err(GradError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = Tensor::zeros(&[ar, ac + bc]);
        for i in 0..ar {
            out.data[i * (ac + bc)..i * (ac + bc) + ac]
                .copy_from_slice(&self.value(a).data[i * ac..(i + 1) * ac]);
            out.data[i * (ac + bc) + ac..(i + 1) * (ac + bc)]
                .copy_from_slice(&self.value(b).data[i * bc..(i + 1) * bc]);
        }
        if self.value(a).shape.len() == 1 {
            out.shape = vec![ac + bc];
        }
        Ok(self.push(Op::ConcatCols { a: a.0, b: b.0 }, out))
    }

    /// Select a contiguous column range.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = self.value(a).dims2();
        if start + len > c {
            return Err(GradError::InvalidArgument {
                op: "slice_cols",
                expected: "column range within bounds",
                got: vec![start, len, c],
            });
        }
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).data[i * c + start..i * c + start + len]);
        }
        if self.value(a).shape.len() == 1 {
            out.shape = vec![len];
        }
        Ok(self.push(Op::SliceCols { a: a.0, start, len }, out))
    }

    /// Differentiable linear solve `X = A^{-1} B`. The factorization is
    /// kept on the tape for the adjoint pass.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let am = self.value(a).to_mat();
        let bm = self.value(b).to_mat();
        let lu = LuFactor::new(&am)?;
        let x = lu.solve(&bm)?;
        let t = Tensor::from_mat(&x);
        Ok(self.push(Op::Solve { a: a.0, b: b.0, lu: Box::new(lu) }, t))
    }

    /// Row-wise monomial features: output column j is the product of the
    /// listed input powers for that row.
    pub fn monomials(&mut self, a: Var, feats: Vec<Monomial>) -> Var {
        let (r, c) = self.value(a).dims2();
        let k = feats.len();
        let mut out = Tensor::zeros(&[r, k]);
        for i in 0..r {
            let row = &self.value(a).data[i * c..(i + 1) * c];
            for (j, feat) in feats.iter().enumerate() {
                let mut v = 1.0;
                for &(idx, p) in feat {
                    v *= row[idx].powi(p as i32);
                }
                out.data[i * k + j] = v;
            }
        }
        if self.value(a).shape.len() == 1 {
            out.shape = vec![k];
        }
        self.push(Op::Monomials { a: a.0, feats }, out)
    }

    /// Row-wise two-region sparse code: a row x of width d maps to width 2d,
    /// filling the first block when `x[coord] < threshold` and the second
    /// block otherwise.
    pub fn region_select(&mut self, a: Var, coord: usize, threshold: f64) -> Var {
        let (r, d) = self.value(a).dims2();
        let mut out = Tensor::zeros(&[r, 2 * d]);
        for i in 0..r {
            let row = &self.value(a).data[i * d..(i + 1) * d];
            let offset = if row[coord] < threshold { 0 } else { d };
            out.data[i * 2 * d + offset..i * 2 * d + offset + d].copy_from_slice(row);
        }
        if self.value(a).shape.len() == 1 {
            out.shape = vec![2 * d];
        }
        self.push(Op::RegionSelect { a: a.0, coord, threshold }, out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        let sa = &self.value(a).shape;
        let sb = &self.value(b).shape;
        let da = self.value(a).dims2();
        let db = self.value(b).dims2();
        if da != db {
            return Err(GradError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Returns per-node adjoints for
    /// every node on a gradient path.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        if self.nodes.is_empty() {
            return Err(GradError::InvalidArgument {
                op: "backward",
                expected: "a nonempty tape",
                got: vec![],
            });
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GradError::InvalidArgument {
                op: "backward",
                expected: "a scalar loss",
                got: lt.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let gm = g.to_mat();
                    if self.nodes[*a].requires_grad {
                        let bv = self.nodes[*b].value.to_mat();
                        let da = gm.matmul_nt(&bv);
                        accumulate(&mut grads[*a], &self.nodes[*a].value.shape, da.data());
                    }
                    if self.nodes[*b].requires_grad {
                        let av = self.nodes[*a].value.to_mat();
                        let db = av.matmul_tn(&gm);
                        accumulate(&mut grads[*b], &self.nodes[*b].value.shape, db.data());
                    }
                }
                Op::Transpose { a } => {
                    let gt = g.to_mat().transpose();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, gt.data());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &g.data);
                    accumulate(&mut grads[*b], &self.nodes[*b].value.shape, &g.data);
                }
                Op::AddScaled { a, b, c } => {
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &g.data);
                    let scaled: Vec<f64> = g.data.iter().map(|v| c * v).collect();
                    accumulate(&mut grads[*b], &self.nodes[*b].value.shape, &scaled);
                }
                Op::AddRowBroadcast { a, bias } => {
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &g.data);
                    let (_, c) = self.nodes[*a].value.dims2();
                    let mut bg = vec![0.0; c];
                    for row in g.data.chunks(c) {
                        for (s, v) in bg.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[*bias], &self.nodes[*bias].value.shape, &bg);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &g.data);
                    let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                    accumulate(&mut grads[*b], &self.nodes[*b].value.shape, &neg);
                }
                Op::Scale { a, c } => {
                    let scaled: Vec<f64> = g.data.iter().map(|v| c * v).collect();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &scaled);
                }
                Op::MulScalar { a, s } => {
                    let sv = self.nodes[*s].value.scalar_value();
                    if self.nodes[*a].requires_grad {
                        let scaled: Vec<f64> = g.data.iter().map(|v| sv * v).collect();
                        accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &scaled);
                    }
                    if self.nodes[*s].requires_grad {
                        let dot: f64 = g
                            .data
                            .iter()
                            .zip(&self.nodes[*a].value.data)
                            .map(|(x, y)| x * y)
                            .sum();
                        accumulate(&mut grads[*s], &self.nodes[*s].value.shape, &[dot]);
                    }
                }
                Op::Relu { a } => {
                    let masked: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[*a].value.data)
                        .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &masked);
                }
                Op::Exp { a } => {
                    let out = &self.nodes[idx].value;
                    let scaled: Vec<f64> =
                        g.data.iter().zip(&out.data).map(|(gv, ov)| gv * ov).collect();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &scaled);
                }
                Op::Mse { a, b } => {
                    let gs = g.scalar_value();
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let av = &self.nodes[*a].value.data;
                    let bv = &self.nodes[*b].value.data;
                    let da: Vec<f64> =
                        av.iter().zip(bv).map(|(x, y)| gs * 2.0 * (x - y) / n).collect();
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        let db: Vec<f64> = da.iter().map(|v| -v).collect();
                        accumulate(&mut grads[*b], &self.nodes[*b].value.shape, &db);
                    }
                }
                Op::L1 { a } => {
                    let gs = g.scalar_value();
                    // subgradient at 0 is 0
                    let da: Vec<f64> = self.nodes[*a]
                        .value
                        .data
                        .iter()
                        .map(|v| {
                            if *v > 0.0 {
                                gs
                            } else if *v < 0.0 {
                                -gs
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
                Op::SumRowNorms { a } => {
                    let gs = g.scalar_value();
                    let (r, c) = self.nodes[*a].value.dims2();
                    let av = &self.nodes[*a].value.data;
                    let mut da = vec![0.0; av.len()];
                    for i in 0..r {
                        let row = &av[i * c..(i + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for j in 0..c {
                                da[i * c + j] = gs * row[j] / norm;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
                Op::ConcatCols { a, b } => {
                    let (r, ac) = self.nodes[*a].value.dims2();
                    let (_, bc) = self.nodes[*b].value.dims2();
                    let mut da = vec![0.0; r * ac];
                    let mut db = vec![0.0; r * bc];
                    for i in 0..r {
                        da[i * ac..(i + 1) * ac]
                            .copy_from_slice(&g.data[i * (ac + bc)..i * (ac + bc) + ac]);
                        db[i * bc..(i + 1) * bc]
                            .copy_from_slice(&g.data[i * (ac + bc) + ac..(i + 1) * (ac + bc)]);
                    }
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                    accumulate(&mut grads[*b], &self.nodes[*b].value.shape, &db);
                }
                Op::SliceCols { a, start, len } => {
                    let (r, c) = self.nodes[*a].value.dims2();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
                Op::Solve { a, b, lu } => {
                    // X = A^{-1} B;  dB = A^{-T} dX,  dA = -dB X^T
                    let (xr, xc) = self.nodes[idx].value.dims2();
                    let gx = Mat::from_vec(xr, xc, g.data.clone());
                    let gb = lu.solve_transposed(&gx).expect("adjoint solve failed");
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads[*b], &self.nodes[*b].value.shape, gb.data());
                    }
                    if self.nodes[*a].requires_grad {
                        let xm = self.nodes[idx].value.to_mat();
                        let da = gb.matmul_nt(&xm).scale(-1.0);
                        accumulate(&mut grads[*a], &self.nodes[*a].value.shape, da.data());
                    }
                }
                Op::Monomials { a, feats } => {
                    let (r, c) = self.nodes[*a].value.dims2();
                    let k = feats.len();
                    let av = &self.nodes[*a].value.data;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let row = &av[i * c..(i + 1) * c];
                        for (j, feat) in feats.iter().enumerate() {
                            let gv = g.data[i * k + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, &(idx_in, p)) in feat.iter().enumerate() {
                                let mut d = p as f64 * row[idx_in].powi(p as i32 - 1);
                                for (u, &(other, q)) in feat.iter().enumerate() {
                                    if u != t {
                                        d *= row[other].powi(q as i32);
                                    }
                                }
                                da[i * c + idx_in] += gv * d;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
                Op::Mask { a, mask } => {
                    let da: Vec<f64> = g.data.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
                Op::RegionSelect { a, coord, threshold } => {
                    let (r, d) = self.nodes[*a].value.dims2();
                    let av = &self.nodes[*a].value.data;
                    let mut da = vec![0.0; r * d];
                    for i in 0..r {
                        let offset = if av[i * d + *coord] < *threshold { 0 } else { d };
                        da[i * d..(i + 1) * d]
                            .copy_from_slice(&g.data[i * 2 * d + offset..i * 2 * d + offset + d]);
                    }
                    accumulate(&mut grads[*a], &self.nodes[*a].value.shape, &da);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor { shape: a.shape.clone(), data, requires_grad: false }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contrib: &[f64]) {
    match slot {
        Some(t) => {
            for (s, c) in t.data.iter_mut().zip(contrib) {
                *s += c;
            }
        }
        None => {
            let mut t = Tensor::zeros(shape);
            t.data.copy_from_slice(contrib);
            *slot = Some(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, loss: Var, x: Var) -> Vec<f64> {
        tape.backward(loss).unwrap().get(x).unwrap().data.clone()
    }

    #[test]
    fn square_gradient() {
        // loss = x^2 via x*x as a 1x1 matmul; grad at x=3 is 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).with_grad());
        let y = tape.matmul(x, x).unwrap();
        assert_eq!(tape.value(y).data[0], 9.0);
        assert_eq!(grad_of(&tape, y, x), vec![6.0]);
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);
        let s = tape.sum_row_norms(y);
        let g = grad_of(&tape, s, x);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] > 0.0);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.leaf(Tensor::matrix(3, 2, (1..=6).map(f64::from).collect()));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data, tape.value(a).data);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).scalar_value(), 0.0);
    }

    #[test]
    fn l1_subgradient_signs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-2.0, 0.5, 0.0]).with_grad());
        let l = tape.l1_norm(x);
        assert_eq!(tape.value(l).scalar_value(), 2.5);
        let g = grad_of(&tape, l, x);
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn solve_forward_matches_lu() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![4.0, 3.0, 6.0, 3.0]));
        let b = tape.leaf(Tensor::matrix(2, 1, vec![10.0, 12.0]));
        let x = tape.solve(a, b).unwrap();
        assert!((tape.value(x).data[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(x).data[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_zeroes_forward_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]).with_grad());
        let m = tape.mask(x, &[1.0, 0.0]).unwrap();
        assert_eq!(tape.value(m).data, vec![2.0, 0.0]);
        let s = tape.sum_row_norms(m);
        let g = grad_of(&tape, s, x);
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn region_select_routes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.5, 7.0, 2.0, -3.0]));
        let z = tape.region_select(x, 0, 1.0);
        assert_eq!(tape.value(z).data, vec![0.5, 7.0, 0.0, 0.0, 0.0, 0.0, 2.0, -3.0]);
    }
}
