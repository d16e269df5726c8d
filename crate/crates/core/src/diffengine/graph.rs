use std::rc::Rc;

use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, norm, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Layout for the fused attention kernel: how the packed token rows split into
/// sequences, the head grouping, and one `n×n` weight mask per sequence.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// `(start_row, len)` for every packed sequence.
    pub segments: Vec<(usize, usize)>,
    /// Row-major `len×len` weights in `[0,1]`; entry `(i,j)` scales how much
    /// query position `i` may attend to key position `j`.
    pub masks: Vec<Rc<Vec<f64>>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2Normalize(Var),
    Cosine(Var, Var),
    IndexRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    MaskApply(Var, Rc<Tensor>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SegmentMean(Var, Vec<(usize, usize)>),
    Log1pSumExp(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        /// Attention weights, indexed `[segment][head]`, each `len×len`.
        weights: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode tape. Build one per step; `backward` may run once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `b` broadcasts onto `a` when its shape equals `a`'s or is a trailing suffix of it.
fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[x.0].tracked;
        self.push(value, op, tracked)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A trainable input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul_nt", ta)?;
        let (n, k2) = require_2d("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), tracked))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !trailing_broadcast(ta.shape(), tb.shape()) {
            return Err(mismatch(name, ta, tb));
        }
        let bn = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % bn]))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise `a + b`; `b` may be a trailing-dimension suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.unary(x, value, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(i) = t.data().iter().position(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::domain(
                "log",
                format!("non-positive input {} at index {i}", t.data()[i]),
            ));
        }
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.unary(x, value, Op::Log(x)))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.unary(x, value, Op::Silu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - m).exp();
                z += *dst;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.unary(x, value, Op::SoftmaxRows(x))
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (dst, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *dst = v - lse;
            }
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.unary(x, value, Op::LogSoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, _) = t.rows_cols();
        let data: Vec<f64> = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        let shape = if t.shape().len() > 1 {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = Tensor::new(&shape, data).expect("consistent shape");
        self.unary(x, value, Op::SumLast(x))
    }

    /// Scale every row (last axis) to unit L2 norm. Zero rows are a domain error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::domain(
                    "l2_normalize",
                    format!("row {r} has norm {n}"),
                ));
            }
            for (dst, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *dst = v / n;
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.unary(x, value, Op::L2Normalize(x)))
    }

    /// Cosine similarity of two equal-shape tensors, treated as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("cosine", ta, tb));
        }
        let (na, nb) = (norm(ta.data()), norm(tb.data()));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::domain("cosine", "zero-norm operand"));
        }
        let c = dot(ta.data(), tb.data()) / (na * nb);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), tracked))
    }

    /// Gather rows (along the first axis) of a 2-D tensor.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = require_2d("index_rows", t)?;
        if idx.is_empty() {
            return Err(Error::invalid("index_rows needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[idx.len(), cols], out)?;
        Ok(self.unary(x, value, Op::IndexRows(x, idx.to_vec())))
    }

    /// `out[r] = x[r, idx[r]]`
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = require_2d("pick_per_row", t)?;
        if idx.len() != rows {
            return Err(Error::invalid(format!(
                "pick_per_row: {} indices for {rows} rows",
                idx.len()
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::invalid(format!(
                    "column index {c} out of range for {cols} columns"
                )));
            }
            out.push(t.at2(r, c));
        }
        let value = Tensor::vector(out);
        Ok(self.unary(x, value, Op::PickPerRow(x, idx.to_vec())))
    }

    /// Elementwise product with a constant mask of identical shape.
    pub fn mask_apply(&mut self, x: Var, mask: Rc<Tensor>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(mismatch("mask_apply", t, &mask));
        }
        let data = t.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.unary(x, value, Op::MaskApply(x, mask)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = require_2d("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_2d("concat_cols", t)?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = require_2d("slice_cols", t)?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(&[rows, len], out)?;
        Ok(self.unary(x, value, Op::SliceCols(x, start)))
    }

    /// Mean of each `(start, len)` row range of a 2-D tensor.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = require_2d("segment_mean", t)?;
        if segments.is_empty() {
            return Err(Error::invalid("segment_mean needs at least one segment"));
        }
        let mut out = vec![0.0; segments.len() * cols];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > rows {
                return Err(Error::invalid(format!(
                    "segment ({start},{len}) out of range for {rows} rows"
                )));
            }
            let o = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for (dst, v) in o.iter_mut().zip(t.row(r)) {
                    *dst += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        let value = Tensor::new(&[segments.len(), cols], out)?;
        Ok(self.unary(x, value, Op::SegmentMean(x, segments.to_vec())))
    }

    /// `log(1 + Σ exp(x))` over all elements, computed stably.
    pub fn log1p_sum_exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().cloned().fold(0.0_f64, f64::max);
        let s = (-m).exp() + t.data().iter().map(|v| (v - m).exp()).sum::<f64>();
        self.unary(x, Tensor::scalar(m + s.ln()), Op::Log1pSumExp(x))
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (rows, cols) = tx.rows_cols();
        if tg.shape() != [cols] {
            return Err(mismatch("rms_norm", tx, tg));
        }
        let mut out = vec![0.0; tx.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = dot(row, row) / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((dst, &v), &g) in out[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(row)
                .zip(tg.data())
            {
                *dst = v * inv * g;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let tracked = self.any_tracked(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, tracked))
    }

    /// Grouped-query attention over packed sequences.
    ///
    /// Weights are `M_ij·exp(s_ij) / Σ_j M_ij·exp(s_ij)` with `s = q·k/√d`:
    /// softmax over the keys the mask admits, scaled by the mask, renormalized.
    /// Zero mask entries contribute exactly nothing.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let l = &*layout;
        if l.kv_heads == 0 || !l.heads.is_multiple_of(l.kv_heads) {
            return Err(Error::invalid(format!(
                "heads {} not divisible by kv_heads {}",
                l.heads, l.kv_heads
            )));
        }
        if l.segments.len() != l.masks.len() {
            return Err(Error::invalid("one mask per segment required"));
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t_rows, qw) = require_2d("attention", tq)?;
        let (k_rows, kw) = require_2d("attention", tk)?;
        if qw != l.heads * l.head_dim || kw != l.kv_heads * l.head_dim || k_rows != t_rows {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tk.shape() {
            return Err(mismatch("attention", tk, tv));
        }
        let d = l.head_dim;
        let group = l.heads / l.kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; t_rows * qw];
        let mut weights = Vec::with_capacity(l.segments.len());
        for (&(start, n), mask) in l.segments.iter().zip(&l.masks) {
            if start + n > t_rows || mask.len() != n * n {
                return Err(Error::invalid(format!(
                    "segment ({start},{n}) inconsistent with {t_rows} rows or mask of {}",
                    mask.len()
                )));
            }
            let mut seg_w = Vec::with_capacity(l.heads);
            for h in 0..l.heads {
                let kvh = h / group;
                let mut w = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &tq.row(start + i)[h * d..(h + 1) * d];
                    let wrow = &mut w[i * n..(i + 1) * n];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..n {
                        if mask[i * n + j] > 0.0 {
                            let kj = &tk.row(start + j)[kvh * d..(kvh + 1) * d];
                            let s = dot(qi, kj) * scale;
                            wrow[j] = s;
                            m = m.max(s);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..n {
                        let mij = mask[i * n + j];
                        if mij > 0.0 {
                            wrow[j] = mij * (wrow[j] - m).exp();
                            z += wrow[j];
                        }
                    }
                    let orow = &mut out[(start + i) * qw + h * d..(start + i) * qw + (h + 1) * d];
                    for j in 0..n {
                        if mask[i * n + j] > 0.0 {
                            wrow[j] /= z;
                            let vj = &tv.row(start + j)[kvh * d..(kvh + 1) * d];
                            for (o, &vv) in orow.iter_mut().zip(vj) {
                                *o += wrow[j] * vv;
                            }
                        }
                    }
                }
                seg_w.push(w);
            }
            weights.push(seg_w);
        }
        let value = Tensor::new(&[t_rows, qw], out)?;
        let tracked = self.any_tracked(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar loss. Every tracked leaf receives a gradient
    /// (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Err(Error::invalid("loss does not depend on any tracked leaf"));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape matches value")
    }

    /// Sum a full-shape gradient down onto a trailing-suffix operand.
    fn reduce_to(&self, v: Var, g: &[f64]) -> Tensor {
        let n = self.value(v).len();
        let mut out = vec![0.0; n];
        for (i, x) in g.iter().enumerate() {
            out[i % n] += x;
        }
        self.like(v, out)
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(&mut da, gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&mut db, ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(&mut da, gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(&mut db, gd, ta.data(), m, n, k);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, self.reduce_to(*b, gd));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.is_tracked(*b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, self.reduce_to(*b, &neg));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bn = tb.len();
                if self.is_tracked(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * tb.data()[i % bn])
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.is_tracked(*b) {
                    let full: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, av)| x * av).collect();
                    self.accumulate(grads, *b, self.reduce_to(*b, &full));
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = y.rows_cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LogSoftmaxRows(x) => {
                let (rows, cols) = y.rows_cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] = gr[c] - yr[c].exp() * s;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0] / n as f64; n]));
            }
            Op::SumLast(x) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols..(r + 1) * cols].fill(gd[r]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::L2Normalize(x) => {
                let xt = self.value(*x);
                let (rows, cols) = xt.rows_cols();
                let mut d = vec![0.0; xt.len()];
                for r in 0..rows {
                    let n = norm(xt.row(r));
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for c in 0..cols {
                        d[r * cols + c] = (gr[c] - yr[c] * s) / n;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (norm(ta.data()), norm(tb.data()));
                let c = y.item();
                let g0 = gd[0];
                if self.is_tracked(*a) {
                    let d = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&av, &bv)| g0 * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.is_tracked(*b) {
                    let d = tb
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&bv, &av)| g0 * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::IndexRows(x, idx) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut d = vec![0.0; rows * cols];
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += gd[o * cols + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::PickPerRow(x, idx) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut d = vec![0.0; rows * cols];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] = gd[r];
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::MaskApply(x, mask) => {
                let d = gd.iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = y.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.is_tracked(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let w = y.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SegmentMean(x, segments) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut d = vec![0.0; rows * cols];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for r in start..start + len {
                        for c in 0..cols {
                            d[r * cols + c] += gd[s * cols + c] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Log1pSumExp(x) => {
                let lse = y.item();
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| gd[0] * (v - lse).exp())
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (rows, cols) = tx.rows_cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    let xr = tx.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let inv = inv_rms[r];
                    let s: f64 = (0..cols).map(|c| gr[c] * tg.data()[c] * xr[c]).sum();
                    let k = inv * inv * inv * s / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * tg.data()[c] * gr[c] - xr[c] * k;
                        dg[c] += gr[c] * xr[c] * inv;
                    }
                }
                if self.is_tracked(*x) {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.is_tracked(*gain) {
                    self.accumulate(grads, *gain, self.like(*gain, dg));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            } => self.attention_backward(*q, *k, *v, layout, weights, gd, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        weights: &[Vec<Vec<f64>>],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = layout.head_dim;
        let group = layout.heads / layout.kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qw = layout.heads * d;
        let kw = layout.kv_heads * d;
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut gw = Vec::new();
        for (s, &(start, n)) in layout.segments.iter().enumerate() {
            gw.resize(n, 0.0);
            for h in 0..layout.heads {
                let kvh = h / group;
                let w = &weights[s][h];
                for i in 0..n {
                    let go = &gd[(start + i) * qw + h * d..(start + i) * qw + (h + 1) * d];
                    let wrow = &w[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        if wrow[j] == 0.0 {
                            gw[j] = 0.0;
                            continue;
                        }
                        let vj = &tv.row(start + j)[kvh * d..(kvh + 1) * d];
                        gw[j] = dot(go, vj);
                        acc += wrow[j] * gw[j];
                        let dvj = &mut dv[(start + j) * kw + kvh * d..(start + j) * kw + (kvh + 1) * d];
                        for (o, &g) in dvj.iter_mut().zip(go) {
                            *o += wrow[j] * g;
                        }
                    }
                    let qi = &tq.row(start + i)[h * d..(h + 1) * d];
                    for j in 0..n {
                        if wrow[j] == 0.0 {
                            continue;
                        }
                        let ds = wrow[j] * (gw[j] - acc) * scale;
                        let kj = &tk.row(start + j)[kvh * d..(kvh + 1) * d];
                        let dqi = &mut dq[(start + i) * qw + h * d..(start + i) * qw + (h + 1) * d];
                        for (o, &kv) in dqi.iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                        let dkj = &mut dk[(start + j) * kw + kvh * d..(start + j) * kw + (kvh + 1) * d];
                        for (o, &qv) in dkj.iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, self.like(q, dq));
        self.accumulate(grads, k, self.like(k, dk));
        self.accumulate(grads, v, self.like(v, dv));
    }
}
