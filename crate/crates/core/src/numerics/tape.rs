//! Tape-based reverse-mode differentiation over [`Tensor2D`].
//!
//! A forward pass pushes one node per operation onto the tape; backward
//! walks the tape in reverse and applies per-operation analytic gradients.
//! One tape is single-threaded; distinct tapes share nothing.

use rand::Rng;

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

pub type ValueId = usize;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    /// Y = A * B^T
    MatMulTransB(ValueId, ValueId),
    Add(ValueId, ValueId),
    /// A (n x d) + row-broadcast of B (1 x d)
    AddRowBias(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// k * A + c
    AffineScalar(ValueId, f64),
    Sigmoid(ValueId),
    Tanh(ValueId),
    /// out row i = input row indices[i]
    GatherRows(ValueId, Vec<usize>),
    /// stack 1 x d inputs into n x d
    StackRows(Vec<ValueId>),
    /// A (n x d) with per-row weights W (n x 1)
    ScaleRows(ValueId, ValueId),
    /// out row s = sum of input rows with segment id s
    SegmentSumRows(ValueId, Vec<usize>),
    /// softmax over rows sharing a segment id, input n x 1
    SegmentSoftmax(ValueId, Vec<usize>),
    ConcatCols(ValueId, ValueId),
    /// mean over rows of -log softmax(logits)[target]
    SoftmaxCrossEntropy(ValueId, Vec<usize>),
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
    /// mask entries are 0 or 1/(1-p)
    Dropout(ValueId, Vec<f64>),
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Running batch-normalization statistics, one per normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(cols: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; cols],
            running_var: vec![1.0; cols],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor2D> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor2D {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor2D) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.value(a).matmul_transpose_b(self.value(b))?;
        Ok(self.push(y, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// X (n x d) plus row-broadcast bias (1 x d).
    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not broadcast over {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut y = ta.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (v, b) in row.iter_mut().zip(tb.row(0).iter()) {
                *v += b;
            }
        }
        Ok(self.push(y, Op::AddRowBias(a, bias)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut y = ta.clone();
        for (v, w) in y.data_mut().iter_mut().zip(tb.data().iter()) {
            *v *= w;
        }
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn affine_scalar(&mut self, a: ValueId, k: f64, c: f64) -> ValueId {
        let y = self.value(a).map(|v| k * v + c);
        self.push(y, Op::AffineScalar(a, k))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let y = self.value(a).map(sigmoid);
        self.push(y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let y = self.value(a).map(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId> {
        let ta = self.value(a);
        let mut y = Tensor2D::zeros(indices.len(), ta.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= ta.rows() {
                return Err(Error::Index(format!(
                    "row {} out of range for {} rows",
                    idx,
                    ta.rows()
                )));
            }
            y.row_mut(i).copy_from_slice(ta.row(idx));
        }
        Ok(self.push(y, Op::GatherRows(a, indices.to_vec())))
    }

    /// Stack single-row tensors into one matrix.
    pub fn stack_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Input("stack_rows of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut y = Tensor2D::zeros(parts.len(), cols);
        for (i, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != cols {
                return Err(Error::Shape(format!(
                    "stack_rows expects 1x{} parts, got {:?}",
                    cols,
                    t.shape()
                )));
            }
            y.row_mut(i).copy_from_slice(t.row(0));
        }
        Ok(self.push(y, Op::StackRows(parts.to_vec())))
    }

    /// Scale row i of `a` by entry i of the column vector `w`.
    pub fn scale_rows(&mut self, a: ValueId, w: ValueId) -> Result<ValueId> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(Error::Shape(format!(
                "scale_rows weights {:?} vs matrix {:?}",
                tw.shape(),
                ta.shape()
            )));
        }
        let mut y = ta.clone();
        for r in 0..y.rows() {
            let k = tw.get(r, 0);
            for v in y.row_mut(r) {
                *v *= k;
            }
        }
        Ok(self.push(y, Op::ScaleRows(a, w)))
    }

    /// Sum rows of `a` into `out_rows` buckets by segment id. Empty segments
    /// produce zero rows.
    pub fn segment_sum_rows(
        &mut self,
        a: ValueId,
        segments: &[usize],
        out_rows: usize,
    ) -> Result<ValueId> {
        let ta = self.value(a);
        if segments.len() != ta.rows() {
            return Err(Error::Shape(format!(
                "{} segment ids for {} rows",
                segments.len(),
                ta.rows()
            )));
        }
        let mut y = Tensor2D::zeros(out_rows, ta.cols());
        for (r, &s) in segments.iter().enumerate() {
            if s >= out_rows {
                return Err(Error::Index(format!("segment {} out of {}", s, out_rows)));
            }
            let src = ta.row(r).to_vec();
            for (o, v) in y.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(y, Op::SegmentSumRows(a, segments.to_vec())))
    }

    /// Softmax within each segment of a column of scores.
    pub fn segment_softmax(&mut self, scores: ValueId, segments: &[usize]) -> Result<ValueId> {
        let ts = self.value(scores);
        if ts.cols() != 1 || ts.rows() != segments.len() {
            return Err(Error::Shape(format!(
                "segment_softmax expects {}x1 scores, got {:?}",
                segments.len(),
                ts.shape()
            )));
        }
        let y = row_softmax(ts, segments)?;
        Ok(self.push(y, Op::SegmentSoftmax(scores, segments.to_vec())))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Shape(format!(
                "concat_cols row mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut y = Tensor2D::zeros(ta.rows(), ta.cols() + tb.cols());
        for r in 0..ta.rows() {
            let (ac, _bc) = (ta.cols(), tb.cols());
            y.row_mut(r)[..ac].copy_from_slice(ta.row(r));
            y.row_mut(r)[ac..].copy_from_slice(tb.row(r));
        }
        Ok(self.push(y, Op::ConcatCols(a, b)))
    }

    /// Mean cross-entropy loss over rows; returns a 1x1 scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                tl.rows()
            )));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= tl.cols() {
                return Err(Error::Index(format!(
                    "target {} out of range for {} classes",
                    t,
                    tl.cols()
                )));
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let y = Tensor2D::from_vec(1, 1, vec![loss])?;
        Ok(self.push(y, Op::SoftmaxCrossEntropy(logits, targets.to_vec())))
    }

    /// Per-column batch normalization. Train mode normalizes with batch
    /// statistics and updates `state`; eval mode uses the running statistics.
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<ValueId> {
        let tx = self.value(x);
        let (n, d) = tx.shape();
        if state.running_mean.len() != d {
            return Err(Error::Shape(format!(
                "batchnorm state for {} cols applied to {} cols",
                state.running_mean.len(),
                d
            )));
        }
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.shape() != (1, d) || tb.shape() != (1, d) {
            return Err(Error::Shape("batchnorm gamma/beta must be 1 x cols".into()));
        }
        let (mean, var) = if train {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for r in 0..n {
                for (c, v) in tx.row(r).iter().enumerate() {
                    mean[c] += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for r in 0..n {
                for (c, v) in tx.row(r).iter().enumerate() {
                    let dv = v - mean[c];
                    var[c] += dv * dv;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            for c in 0..d {
                state.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
                state.running_var[c] =
                    (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var[c];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let mut y = Tensor2D::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let xhat = (tx.get(r, c) - mean[c]) / (var[c] + BN_EPS).sqrt();
                y.set(r, c, tg.get(0, c) * xhat + tb.get(0, c));
            }
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            },
        ))
    }

    /// Inverted dropout: surviving entries are scaled by 1/(1-rate).
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut impl Rng) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                rate
            )));
        }
        let tx = self.value(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..tx.data().len())
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let mut y = tx.clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        Ok(self.push(y, Op::Dropout(x, mask)))
    }

    /// Reverse pass from a 1x1 scalar node; returns per-node gradients.
    pub fn backward(&self, output: ValueId) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward requires a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[output] = Some(Tensor2D::from_vec(1, 1, vec![1.0])?);
        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        id: ValueId,
        dy: &Tensor2D,
        grads: &mut [Option<Tensor2D>],
    ) -> Result<()> {
        let add_grad = |grads: &mut [Option<Tensor2D>], target: ValueId, g: Tensor2D| {
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = dy.matmul_transpose_b(self.value(*b))?;
                let db = self.value(*a).transpose_a_matmul(dy)?;
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::MatMulTransB(a, b) => {
                // Y = A B^T: dA = dY B, dB = dY^T A
                let da = dy.matmul(self.value(*b))?;
                let db = dy.transpose_a_matmul(self.value(*a))?;
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, dy.clone());
                add_grad(grads, *b, dy.clone());
            }
            Op::AddRowBias(a, bias) => {
                add_grad(grads, *a, dy.clone());
                let mut db = Tensor2D::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, v) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
                add_grad(grads, *bias, db);
            }
            Op::Mul(a, b) => {
                let mut da = dy.clone();
                for (v, w) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *v *= w;
                }
                let mut db = dy.clone();
                for (v, w) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *v *= w;
                }
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::AffineScalar(a, k) => {
                let mut da = dy.clone();
                da.scale_assign(*k);
                add_grad(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut da = dy.clone();
                for (v, s) in da.data_mut().iter_mut().zip(y.data()) {
                    *v *= s * (1.0 - s);
                }
                add_grad(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut da = dy.clone();
                for (v, t) in da.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - t * t;
                }
                add_grad(grads, *a, da);
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let mut da = Tensor2D::zeros(ta.rows(), ta.cols());
                for (i, &idx) in indices.iter().enumerate() {
                    let src = dy.row(i).to_vec();
                    for (o, v) in da.row_mut(idx).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                add_grad(grads, *a, da);
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let mut dp = Tensor2D::zeros(1, dy.cols());
                    dp.row_mut(0).copy_from_slice(dy.row(i));
                    add_grad(grads, p, dp);
                }
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let mut da = dy.clone();
                for r in 0..da.rows() {
                    let k = tw.get(r, 0);
                    for v in da.row_mut(r) {
                        *v *= k;
                    }
                }
                let mut dw = Tensor2D::zeros(tw.rows(), 1);
                for r in 0..ta.rows() {
                    let dot: f64 = dy.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                    dw.set(r, 0, dot);
                }
                add_grad(grads, *a, da);
                add_grad(grads, *w, dw);
            }
            Op::SegmentSumRows(a, segments) => {
                let ta = self.value(*a);
                let mut da = Tensor2D::zeros(ta.rows(), ta.cols());
                for (r, &s) in segments.iter().enumerate() {
                    da.row_mut(r).copy_from_slice(dy.row(s));
                }
                add_grad(grads, *a, da);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &self.nodes[id].value;
                // group rows per segment
                let mut per_seg: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
                for (r, &s) in segments.iter().enumerate() {
                    per_seg.entry(s).or_default().push(r);
                }
                let ta = self.value(*a);
                let mut da = Tensor2D::zeros(ta.rows(), 1);
                for rows in per_seg.values() {
                    let dot: f64 = rows.iter().map(|&r| dy.get(r, 0) * y.get(r, 0)).sum();
                    for &r in rows {
                        da.set(r, 0, y.get(r, 0) * (dy.get(r, 0) - dot));
                    }
                }
                add_grad(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = Tensor2D::zeros(ta.rows(), ta.cols());
                let mut db = Tensor2D::zeros(tb.rows(), tb.cols());
                for r in 0..ta.rows() {
                    da.row_mut(r).copy_from_slice(&dy.row(r)[..ta.cols()]);
                    db.row_mut(r).copy_from_slice(&dy.row(r)[ta.cols()..]);
                }
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let tl = self.value(*logits);
                let scale = dy.get(0, 0) / targets.len() as f64;
                let mut dl = Tensor2D::zeros(tl.rows(), tl.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = tl.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let src: Vec<f64> = row.iter().map(|v| (v - max).exp() / denom).collect();
                    for (c, p) in src.into_iter().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dl.set(r, c, scale * (p - onehot));
                    }
                }
                add_grad(grads, *logits, dl);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (n, d) = tx.shape();
                let mut dgamma = Tensor2D::zeros(1, d);
                let mut dbeta = Tensor2D::zeros(1, d);
                let mut dx = Tensor2D::zeros(n, d);
                for c in 0..d {
                    let inv_std = 1.0 / (var[c] + BN_EPS).sqrt();
                    let g = tg.get(0, c);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for r in 0..n {
                        let xhat = (tx.get(r, c) - mean[c]) * inv_std;
                        let d_out = dy.get(r, c);
                        sum_dy += d_out;
                        sum_dy_xhat += d_out * xhat;
                        dgamma.set(0, c, dgamma.get(0, c) + d_out * xhat);
                        dbeta.set(0, c, dbeta.get(0, c) + d_out);
                    }
                    for r in 0..n {
                        let d_out = dy.get(r, c);
                        let v = if *train {
                            let xhat = (tx.get(r, c) - mean[c]) * inv_std;
                            g * inv_std
                                * (d_out - sum_dy / n as f64 - xhat * sum_dy_xhat / n as f64)
                        } else {
                            g * inv_std * d_out
                        };
                        dx.set(r, c, v);
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *gamma, dgamma);
                add_grad(grads, *beta, dbeta);
            }
            Op::Dropout(x, mask) => {
                let mut dx = dy.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
                add_grad(grads, *x, dx);
            }
        }
        Ok(())
    }
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

/// Segment-wise softmax over a column of scores, stabilized by per-segment
/// max subtraction. Every segment id in `0..max_segment` that appears must
/// be non-empty by construction; an explicitly empty input is rejected.
pub fn row_softmax(scores: &Tensor2D, segments: &[usize]) -> Result<Tensor2D> {
    if scores.cols() != 1 || scores.rows() != segments.len() {
        return Err(Error::Shape(format!(
            "row_softmax expects {}x1 scores, got {:?}",
            segments.len(),
            scores.shape()
        )));
    }
    if segments.is_empty() {
        return Err(Error::Grouping("no segments to normalize".into()));
    }
    let mut per_seg: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (r, &s) in segments.iter().enumerate() {
        per_seg.entry(s).or_default().push(r);
    }
    let mut out = Tensor2D::zeros(scores.rows(), 1);
    for rows in per_seg.values() {
        let max = rows
            .iter()
            .map(|&r| scores.get(r, 0))
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = rows.iter().map(|&r| (scores.get(r, 0) - max).exp()).sum();
        for &r in rows {
            out.set(r, 0, (scores.get(r, 0) - max).exp() / denom);
        }
    }
    Ok(out)
}
