//! Reverse-mode differentiation over a linear record of matrix operations.
//!
//! Every operation appends a node holding its forward value; node indices are
//! therefore already a topological order and `backward` walks them in reverse.
//! Leaves carry the accumulated gradient in their [`Matrix::grad`] slot.

use std::sync::Arc;

use super::matrix::matmul_into;
use super::{Matrix, ParamId, ParamStore};
use crate::compression::Mask;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MaskedMatMul(Var, Var, Arc<Mask>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    /// Forward value is a one-hot argmax row; gradient passes straight through.
    StraightThrough(Var),
    /// Scalar-valued function whose partial derivatives were computed during
    /// the forward pass.
    Scalar { inputs: Vec<Var>, partials: Vec<Vec<f64>> },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by the recorded forward operations.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value)
    }

    pub fn row(&mut self, values: Vec<f64>) -> Var {
        self.leaf(Matrix::row_vector(values))
    }

    /// Copies a stored parameter onto the tape; its gradient is routed back
    /// by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.bindings.push((id, v));
        v
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bindings {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).value.accumulate_grad(g);
            }
        }
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = Matrix::zeros(m, n);
        matmul_into(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x · (w ⊙ mask)`. Masked positions contribute neither FLOPs nor
    /// gradient.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: Arc<Mask>) -> Result<Var> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 || mask.shape() != (k2, n) {
            return Err(shape_err(
                "masked_matmul",
                format!("{m}x{k} · {k2}x{n} with mask {:?}", mask.shape()),
            ));
        }
        let mut out = Matrix::zeros(m, n);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for i in 0..m {
                for p in 0..k {
                    let xv = xd[i * k + p];
                    for j in 0..n {
                        if mask.is_kept(p * n + j) {
                            od[i * n + j] += xv * wd[p * n + j];
                        }
                    }
                }
            }
        }
        self.flops += 2 * (m * mask.kept()) as u64;
        self.push(out, Op::MaskedMatMul(x, w, mask), "masked_matmul")
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac == bc && (ar == br || br == 1) {
            Ok(())
        } else {
            Err(shape_err(op, format!("{ar}x{ac} with {br}x{bc}")))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let av = self.value(a);
        let bv = self.value(b);
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = if bv.rows() == 1 { i % cols } else { i };
                f(x, bv.data()[j])
            })
            .collect();
        Matrix::new(av.rows(), cols, data).expect("shape preserved")
    }

    /// Elementwise sum; `b` may be a row vector broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        self.flops += out.len() as u64;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        self.flops += out.len() as u64;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        self.flops += out.len() as u64;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * s);
        self.flops += out.len() as u64;
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), sigmoid);
        self.flops += out.len() as u64;
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::tanh);
        self.flops += out.len() as u64;
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| x.max(0.0));
        self.flops += out.len() as u64;
        self.push(out, Op::Relu(a), "relu")
    }

    /// Dispatch for the pointwise family. Unary kinds ignore `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |b: Option<Var>| {
            b.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs two operands")))
        };
        match kind {
            Elementwise::Add => {
                let b = binary(b)?;
                self.add(a, b)
            }
            Elementwise::Mul => {
                let b = binary(b)?;
                self.mul(a, b)
            }
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Relu => self.relu(a),
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::new(rows, cols, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::new(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if start + len > cols || len == 0 {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
        }
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Row-wise, max-shifted softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        out.grad = None;
        for r in 0..v.rows() {
            let p = softmax(v.row(r));
            out.data_mut()[r * v.cols()..(r + 1) * v.cols()].copy_from_slice(&p);
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        out.grad = None;
        for r in 0..v.rows() {
            let p = log_softmax(v.row(r));
            out.data_mut()[r * v.cols()..(r + 1) * v.cols()].copy_from_slice(&p);
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", "empty input"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Matrix::scalar(s), Op::Mean(a), "mean")
    }

    /// One-hot of the row-wise argmax in the forward pass, identity in the
    /// backward pass.
    pub fn straight_through_one_hot(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            let k = argmax(v.row(r));
            out.set(r, k, 1.0);
        }
        self.push(out, Op::StraightThrough(a), "straight_through")
    }

    /// Records a scalar function of `inputs` whose value and partial
    /// derivatives were computed by the caller.
    pub fn custom_scalar(
        &mut self,
        inputs: Vec<Var>,
        value: f64,
        partials: Vec<Vec<f64>>,
        name: &'static str,
    ) -> Result<Var> {
        if inputs.len() != partials.len()
            || inputs.iter().zip(&partials).any(|(&v, p)| self.value(v).len() != p.len())
        {
            return Err(shape_err(name, "partials do not match inputs"));
        }
        self.push(Matrix::scalar(value), Op::Scalar { inputs, partials }, name)
    }

    /// Propagates d(root)/d(leaf) into every reachable leaf's gradient
    /// accumulator. Repeated calls add to existing leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    let mut ga = vec![0.0; m * k];
                    let bt = bv.transpose();
                    matmul_into(&g, bt.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    let at = av.transpose();
                    matmul_into(at.data(), &g, &mut gb, k, m, n);
                    add_to(&mut grads, *a, &ga);
                    add_to(&mut grads, *b, &gb);
                }
                Op::MaskedMatMul(x, w, mask) => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (m, k) = xv.shape();
                    let n = wv.cols();
                    let mut gx = vec![0.0; m * k];
                    let mut gw = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let xval = xv.data()[i * k + p];
                            let mut acc = 0.0;
                            for j in 0..n {
                                let idx = p * n + j;
                                if mask.is_kept(idx) {
                                    let gij = g[i * n + j];
                                    acc += gij * wv.data()[idx];
                                    gw[idx] += xval * gij;
                                }
                            }
                            gx[i * k + p] += acc;
                        }
                    }
                    add_to(&mut grads, *x, &gx);
                    add_to(&mut grads, *w, &gw);
                }
                Op::Add(a, b) => {
                    add_to(&mut grads, *a, &g);
                    let gb = reduce_broadcast(&g, self.nodes[b.0].value.shape(), node.value.cols());
                    add_to(&mut grads, *b, &gb);
                }
                Op::Sub(a, b) => {
                    add_to(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let gb =
                        reduce_broadcast(&neg, self.nodes[b.0].value.shape(), node.value.cols());
                    add_to(&mut grads, *b, &gb);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let cols = av.cols();
                    let bidx = |i: usize| if bv.rows() == 1 { i % cols } else { i };
                    let ga: Vec<f64> =
                        g.iter().enumerate().map(|(i, gi)| gi * bv.data()[bidx(i)]).collect();
                    let gb_full: Vec<f64> =
                        g.iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect();
                    let gb = reduce_broadcast(&gb_full, bv.shape(), cols);
                    add_to(&mut grads, *a, &ga);
                    add_to(&mut grads, *b, &gb);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                    add_to(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> =
                        g.iter().zip(node.value.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                    add_to(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> =
                        g.iter().zip(node.value.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                    add_to(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_to(&mut grads, *a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                        }
                        add_to(&mut grads, *p, &gp);
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        add_to(&mut grads, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    let len = node.value.cols();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_to(&mut grads, *a, &ga);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = node.value.shape();
                    let gm = Matrix::new(rows, cols, g).expect("grad shape");
                    add_to(&mut grads, *a, gm.transpose().data());
                }
                Op::Softmax(a) => {
                    let (rows, cols) = node.value.shape();
                    let y = node.value.data();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    add_to(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let (rows, cols) = node.value.shape();
                    let y = node.value.data();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[s.clone()].iter().sum();
                        for j in s {
                            ga[j] = g[j] - y[j].exp() * gsum;
                        }
                    }
                    add_to(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_to(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_to(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::StraightThrough(a) => {
                    add_to(&mut grads, *a, &g);
                }
                Op::Scalar { inputs, partials } => {
                    for (v, p) in inputs.iter().zip(partials) {
                        let gv: Vec<f64> = p.iter().map(|d| d * g[0]).collect();
                        add_to(&mut grads, *v, &gv);
                    }
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn add_to(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Sums a full-shape gradient down to a broadcast row vector when needed.
fn reduce_broadcast(g: &[f64], target: (usize, usize), cols: usize) -> Vec<f64> {
    if target.0 == 1 && g.len() != cols {
        let mut out = vec![0.0; cols];
        for (i, v) in g.iter().enumerate() {
            out[i % cols] += v;
        }
        out
    } else {
        g.to_vec()
    }
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::new(m.rows(), m.cols(), m.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
