//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or parameters taken from a [`ParamStore`]; calling
//! [`Graph::backward`] on a `1 x 1` node returns the gradient of that scalar
//! with respect to every parameter that was read.
//!
//! Attention, pooling and the loss heads are fused operations with
//! hand-written backward passes so the tape stays short.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
        keep: Option<Vec<bool>>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    RowSoftmax(Var),
    LogSumExpRows(Var),
    RowDot(Var, Var),
    Diag(Var),
    Sum(Var),
    MaskRows(Var, Vec<bool>),
    L2NormalizeRows(Var),
    LayerNormRows(Var),
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        seq_len: usize,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        seq_len: usize,
        heads: usize,
        /// `n * heads * L * L`, row-major per (sequence, head, query).
        weights: Vec<f64>,
    },
    TargetAttention {
        query: Var,
        z: Var,
        mask: Vec<bool>,
        seq_len: usize,
        /// `n * L`
        weights: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Softmax of `scores` restricted to `valid` entries; invalid entries get
/// weight exactly zero. Returns all zeros when nothing is valid.
pub fn masked_softmax(scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(valid)
        .map(|(&s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a stored parameter. Repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_tn(self.value(b));
        self.push(out, Op::MatMulTN(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(out.shape(), bv.shape(), "sub shape");
        for (x, y) in out.data_mut().iter_mut().zip(bv.data()) {
            *x -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), self.value(a).cols(), "bias width");
        let b = bv.data().to_vec();
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row `i` of the result is `table[indices[i]]`, or zeros where `keep[i]` is false.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], keep: Option<&[bool]>) -> Var {
        let t = self.value(table);
        if let Some(k) = keep {
            assert_eq!(k.len(), indices.len());
        }
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (r, &idx) in indices.iter().enumerate() {
            if keep.is_none_or(|k| k[r]) {
                out.row_mut(r).copy_from_slice(t.row(idx));
            }
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
                keep: keep.map(<[bool]>::to_vec),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row count");
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let all = vec![true; x.cols()];
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&masked_softmax(x.row(r), &all));
        }
        self.push(out, Op::RowSoftmax(a))
    }

    /// `n x c -> n x 1`
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| log_sum_exp(x.row(r))).collect();
        let out = Matrix::from_vec(x.rows(), 1, data).expect("shape");
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Row-wise inner products, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "row_dot shape");
        let data = (0..x.rows()).map(|r| dot(x.row(r), y.row(r))).collect();
        let out = Matrix::from_vec(x.rows(), 1, data).expect("shape");
        self.push(out, Op::RowDot(a, b))
    }

    /// Diagonal of a square matrix as `n x 1`.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), x.cols(), "diag of non-square matrix");
        let data = (0..x.rows()).map(|i| x.get(i, i)).collect();
        let out = Matrix::from_vec(x.rows(), 1, data).expect("shape");
        self.push(out, Op::Diag(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Zeros every row whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.rows(), mask.len(), "mask_rows length");
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                out.row_mut(r).fill(0.0);
            }
        }
        self.push(out, Op::MaskRows(a, mask.to_vec()))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt().max(1e-12);
            for x in row {
                *x /= norm;
            }
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a))
    }

    /// Mask-weighted mean over each block of `seq_len` rows: `(n*L) x D -> n x D`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool], seq_len: usize) -> Result<Var> {
        let xv = self.value(x);
        assert_eq!(xv.rows(), mask.len());
        let n = mask.len() / seq_len;
        let mut out = Matrix::zeros(n, xv.cols());
        for b in 0..n {
            let count = mask[b * seq_len..(b + 1) * seq_len]
                .iter()
                .filter(|&&m| m)
                .count();
            if count == 0 {
                return Err(Error::EmptySequence(format!(
                    "sequence {b} of the batch has no valid positions"
                )));
            }
            let inv = 1.0 / count as f64;
            let orow = out.row_mut(b);
            for t in 0..seq_len {
                if mask[b * seq_len + t] {
                    for (o, v) in orow.iter_mut().zip(xv.row(b * seq_len + t)) {
                        *o += v * inv;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                seq_len,
            },
        ))
    }

    /// Masked multi-head scaled dot-product self-attention over a batch of
    /// sequences laid out as `(n*L) x D`. Head `h` uses columns
    /// `h*d_k..(h+1)*d_k`. Padded query rows produce zeros.
    pub fn self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        seq_len: usize,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(width % heads, 0, "width not divisible by heads");
        assert_eq!(qv.rows(), mask.len());
        let dk = width / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let n = mask.len() / seq_len;
        let mut out = Matrix::zeros(qv.rows(), width);
        let mut weights = vec![0.0; n * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for b in 0..n {
            let base = b * seq_len;
            let m = &mask[base..base + seq_len];
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..seq_len {
                    if !m[i] {
                        continue;
                    }
                    let qi = &qv.row(base + i)[cols.clone()];
                    for j in 0..seq_len {
                        scores[j] = if m[j] {
                            dot(qi, &kv.row(base + j)[cols.clone()]) * scale
                        } else {
                            0.0
                        };
                    }
                    let w = masked_softmax(&scores, m);
                    let orow = &mut out.row_mut(base + i)[cols.clone()];
                    for j in 0..seq_len {
                        if w[j] != 0.0 {
                            for (o, x) in orow.iter_mut().zip(&vv.row(base + j)[cols.clone()]) {
                                *o += w[j] * x;
                            }
                        }
                    }
                    let off = ((b * heads + h) * seq_len + i) * seq_len;
                    weights[off..off + seq_len].copy_from_slice(&w);
                }
            }
        }
        self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                seq_len,
                heads,
                weights,
            },
        )
    }

    /// One query row per sequence attending over that sequence's states:
    /// `query: n x D`, `z: (n*L) x D` -> `n x D`. Keys and values are both `z`.
    pub fn target_attention(
        &mut self,
        query: Var,
        z: Var,
        mask: &[bool],
        seq_len: usize,
    ) -> Result<Var> {
        let (qv, zv) = (self.value(query), self.value(z));
        let n = qv.rows();
        assert_eq!(zv.rows(), n * seq_len, "target_attention history rows");
        assert_eq!(qv.cols(), zv.cols(), "target_attention width");
        let scale = 1.0 / (qv.cols() as f64).sqrt();
        let mut out = Matrix::zeros(n, qv.cols());
        let mut weights = vec![0.0; n * seq_len];
        for b in 0..n {
            let m = &mask[b * seq_len..(b + 1) * seq_len];
            if !m.iter().any(|&x| x) {
                return Err(Error::EmptySequence(format!(
                    "target attention over empty history (row {b})"
                )));
            }
            let scores: Vec<f64> = (0..seq_len)
                .map(|t| {
                    if m[t] {
                        dot(qv.row(b), zv.row(b * seq_len + t)) * scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let w = masked_softmax(&scores, m);
            let orow = out.row_mut(b);
            for t in 0..seq_len {
                if w[t] != 0.0 {
                    for (o, x) in orow.iter_mut().zip(zv.row(b * seq_len + t)) {
                        *o += w[t] * x;
                    }
                }
            }
            weights[b * seq_len..(b + 1) * seq_len].copy_from_slice(&w);
        }
        Ok(self.push(
            out,
            Op::TargetAttention {
                query,
                z,
                mask: mask.to_vec(),
                seq_len,
                weights,
            },
        ))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// with the probability clamped to `[eps, 1 - eps]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let z = self.value(logits);
        assert_eq!(z.cols(), 1, "logits must be a column");
        assert_eq!(z.rows(), labels.len(), "label count");
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidLabel(y));
            }
            let p = sigmoid(z.get(r, 0)).clamp(eps, 1.0 - eps);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.insert(*id, gout),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, &gout, false, bv, true, 0.0, &mut da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, &gout, false, 0.0, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, &gout, false, bv, false, 0.0, &mut da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, &gout, true, av, false, 0.0, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTN(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, bv, false, &gout, true, 0.0, &mut da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, false, &gout, false, 0.0, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, gout.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gout.clone());
                    accumulate(&mut grads, *a, gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, gout.scaled(-1.0));
                    accumulate(&mut grads, *a, gout);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (d, g) in db.data_mut().iter_mut().zip(gout.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, gout);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, gout.scaled(*s)),
                Op::Tanh(a) => {
                    let mut da = gout;
                    for (d, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows {
                    table,
                    indices,
                    keep,
                } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        if keep.as_ref().is_none_or(|k| k[r]) {
                            for (d, g) in dt.row_mut(i).iter_mut().zip(gout.row(r)) {
                                *d += g;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, gout.reshaped(r, c));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r)
                                .copy_from_slice(&gout.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(gout.row(r), y.row(r));
                        for ((d, g), yy) in da.row_mut(r).iter_mut().zip(gout.row(r)).zip(y.row(r))
                        {
                            *d = yy * (g - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let all = vec![true; x.cols()];
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let w = masked_softmax(x.row(r), &all);
                        let g = gout.get(r, 0);
                        for (d, wi) in da.row_mut(r).iter_mut().zip(&w) {
                            *d = g * wi;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let g = gout.get(r, 0);
                        for ((x, y), (dx, dy)) in av
                            .row(r)
                            .iter()
                            .zip(bv.row(r))
                            .zip(da.row_mut(r).iter_mut().zip(db.row_mut(r).iter_mut()))
                        {
                            *dx = g * y;
                            *dy = g * x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Diag(a) => {
                    let n = gout.rows();
                    let mut da = Matrix::zeros(n, n);
                    for i in 0..n {
                        da.set(i, i, gout.get(i, 0));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, gout.get(0, 0)));
                }
                Op::MaskRows(a, mask) => {
                    let mut da = gout;
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            da.row_mut(r).fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = dot(x.row(r), x.row(r)).sqrt().max(1e-12);
                        let proj = dot(y.row(r), gout.row(r));
                        for ((d, g), yy) in da.row_mut(r).iter_mut().zip(gout.row(r)).zip(y.row(r))
                        {
                            *d = (g - yy * proj) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNormRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let c = x.cols() as f64;
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / c;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g = gout.row(r);
                        let g_mean = g.iter().sum::<f64>() / c;
                        let gy_mean = dot(g, y.row(r)) / c;
                        for ((d, gi), yi) in da.row_mut(r).iter_mut().zip(g).zip(y.row(r)) {
                            *d = inv * (gi - g_mean - yi * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanPool { x, mask, seq_len } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = rows / seq_len;
                    for b in 0..n {
                        let m = &mask[b * seq_len..(b + 1) * seq_len];
                        let inv = 1.0 / m.iter().filter(|&&v| v).count() as f64;
                        for t in 0..*seq_len {
                            if m[t] {
                                for (d, g) in dx.row_mut(b * seq_len + t).iter_mut().zip(gout.row(b))
                                {
                                    *d = g * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SelfAttention {
                    q,
                    k,
                    v,
                    mask,
                    seq_len,
                    heads,
                    weights,
                } => {
                    let (dq, dk, dv) =
                        self.self_attention_backward(&gout, *q, *k, *v, mask, *seq_len, *heads, weights);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::TargetAttention {
                    query,
                    z,
                    mask,
                    seq_len,
                    weights,
                } => {
                    let qv = self.value(*query);
                    let zv = self.value(*z);
                    let scale = 1.0 / (qv.cols() as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    let mut dz = Matrix::zeros(zv.rows(), zv.cols());
                    for b in 0..qv.rows() {
                        let w = &weights[b * seq_len..(b + 1) * seq_len];
                        let g = gout.row(b);
                        let dw: Vec<f64> = (0..*seq_len)
                            .map(|t| {
                                if mask[b * seq_len + t] {
                                    dot(g, zv.row(b * seq_len + t))
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let wdw = dot(w, &dw);
                        for t in 0..*seq_len {
                            if !mask[b * seq_len + t] {
                                continue;
                            }
                            let ds = w[t] * (dw[t] - wdw) * scale;
                            let zrow = zv.row(b * seq_len + t).to_vec();
                            for (d, zz) in dq.row_mut(b).iter_mut().zip(&zrow) {
                                *d += ds * zz;
                            }
                            let qrow = qv.row(b);
                            for ((d, gg), qq) in dz.row_mut(b * seq_len + t).iter_mut().zip(g).zip(qrow)
                            {
                                *d += w[t] * gg + ds * qq;
                            }
                        }
                    }
                    accumulate(&mut grads, *query, dq);
                    accumulate(&mut grads, *z, dz);
                }
                Op::BceWithLogits {
                    logits,
                    labels,
                    eps,
                } => {
                    let z = self.value(*logits);
                    let g = gout.get(0, 0);
                    let mut dz = Matrix::zeros(z.rows(), 1);
                    for (r, &y) in labels.iter().enumerate() {
                        let p = sigmoid(z.get(r, 0));
                        if p > *eps && p < 1.0 - eps {
                            dz.set(r, 0, g * (p - y));
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attention_backward(
        &self,
        gout: &Matrix,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        seq_len: usize,
        heads: usize,
        weights: &[f64],
    ) -> (Matrix, Matrix, Matrix) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let dk_width = width / heads;
        let scale = 1.0 / (dk_width as f64).sqrt();
        let n = mask.len() / seq_len;
        let mut dq = Matrix::zeros(qv.rows(), width);
        let mut dk = Matrix::zeros(kv.rows(), width);
        let mut dv = Matrix::zeros(vv.rows(), width);
        let mut dw = vec![0.0; seq_len];
        for b in 0..n {
            let base = b * seq_len;
            let m = &mask[base..base + seq_len];
            for h in 0..heads {
                let cols = h * dk_width..(h + 1) * dk_width;
                for i in 0..seq_len {
                    if !m[i] {
                        continue;
                    }
                    let off = ((b * heads + h) * seq_len + i) * seq_len;
                    let w = &weights[off..off + seq_len];
                    let g = &gout.row(base + i)[cols.clone()];
                    for j in 0..seq_len {
                        dw[j] = if m[j] {
                            dot(g, &vv.row(base + j)[cols.clone()])
                        } else {
                            0.0
                        };
                    }
                    let wdw = dot(w, &dw);
                    for j in 0..seq_len {
                        if !m[j] {
                            continue;
                        }
                        for (d, gg) in dv.row_mut(base + j)[cols.clone()].iter_mut().zip(g) {
                            *d += w[j] * gg;
                        }
                        let ds = w[j] * (dw[j] - wdw) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for (d, kk) in dq.row_mut(base + i)[cols.clone()]
                            .iter_mut()
                            .zip(&kv.row(base + j)[cols.clone()])
                        {
                            *d += ds * kk;
                        }
                        for (d, qq) in dk.row_mut(base + j)[cols.clone()]
                            .iter_mut()
                            .zip(&qv.row(base + i)[cols.clone()])
                        {
                            *d += ds * qq;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
