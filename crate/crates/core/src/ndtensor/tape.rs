//! Eagerly recorded computation graph with a single reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep walks it in reverse, visiting
//! each node once. A tape is meant to live for one forward/backward pass.

use rand::Rng;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one series in a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Builds back-to-back segments from per-series lengths.
pub fn segments_from_lengths(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

/// Lower/upper clamp applied to stop probabilities inside budget products.
pub const HALT_CLAMP: f64 = 1e-7;

/// Running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: T::lit(0.9),
            eps: T::lit(1e-5),
        }
    }
}

/// A value on the tape together with its accumulated gradient.
#[derive(Debug)]
pub struct DiffNode<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

impl<T: Scalar> DiffNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.op.is_none()
    }
}

#[derive(Debug)]
enum Op<T> {
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1dCausal {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        cols: Vec<T>,
    },
    PrefixMax {
        f: NodeId,
        argmax: Vec<usize>,
    },
    RunningMax {
        f: NodeId,
        argmax: Vec<usize>,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows {
        x: NodeId,
        probs: Vec<T>,
    },
    ConcatLast(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    GatherCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: T,
    },
    Sum(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Vec<T>,
    },
    Reshape(NodeId),
    Halting {
        delta: NodeId,
        segments: Vec<Segment>,
        clamped: Vec<T>,
        active: Vec<bool>,
        budget_prev: Vec<T>,
    },
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<DiffNode<T>>,
    backpropagated: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &DiffNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` for nodes
    /// that do not require gradients or were not reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Leaf input. `requires_grad=false` leaves never allocate a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            op: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(DiffNode {
            value,
            grad: None,
            op: Some(op),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ------------------------------------------------------------------
    // forward operations
    // ------------------------------------------------------------------

    /// Row-wise affine map `x · weight + bias`. `x` may be a single vector.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(weight).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() > 2 || wd.len() != 2 || xd[xd.len() - 1] != wd[0] {
            return Err(Error::dim("linear", &xd, &wd));
        }
        if bd != [wd[1]] {
            return Err(Error::dim("linear", &wd, &bd));
        }
        let (n, din) = self.value(x).shape().as_rows_cols();
        let dout = wd[1];
        let mut out = matmul(self.value(x).data(), n, din, self.value(weight).data(), dout);
        let b = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
        }
        let dims = if xd.len() == 1 { vec![dout] } else { vec![n, dout] };
        let value = Tensor::from_vec(&dims, out)?;
        Ok(self.push(value, Op::Linear { x, w: weight, b: bias }, &[x, weight, bias]))
    }

    /// Causal 1-D convolution. `x` is `[N×D_in]`, `kernel` is
    /// `[W×D_in×D_out]`; the input is left-padded with `W−1` zero frames so
    /// output `t` only sees `x[0..=t]`.
    pub fn conv1d_causal(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let xd = self.dims(x).to_vec();
        let kd = self.dims(kernel).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() != 2 || kd.len() != 3 || xd[1] != kd[1] {
            return Err(Error::dim("conv1d_causal", &xd, &kd));
        }
        if bd != [kd[2]] {
            return Err(Error::dim("conv1d_causal", &kd, &bd));
        }
        let (n, din) = (xd[0], xd[1]);
        let (w, dout) = (kd[0], kd[2]);
        let cols = im2col(self.value(x).data(), n, din, w);
        let mut out = matmul(&cols, n, w * din, self.value(kernel).data(), dout);
        let b = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
        }
        let value = Tensor::from_vec(&[n, dout], out)?;
        Ok(self.push(
            value,
            Op::Conv1dCausal {
                x,
                k: kernel,
                b: bias,
                cols,
            },
            &[x, kernel, bias],
        ))
    }

    /// Per-feature maximum of `f[0..=t]` (`f` is `[N×D]`), as a `[D]` vector.
    /// Ties route the gradient to the earliest index.
    pub fn prefix_max_pool(&mut self, f: NodeId, t: usize) -> Result<NodeId> {
        let fd = self.dims(f).to_vec();
        if fd.len() != 2 {
            return Err(Error::dim("prefix_max_pool", &fd, &[0, 0]));
        }
        let (n, d) = (fd[0], fd[1]);
        if t >= n {
            return Err(Error::Index {
                op: "prefix_max_pool",
                index: t,
                len: n,
            });
        }
        let data = self.value(f).data();
        let mut best: Vec<T> = data[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for s in 1..=t {
            let row = &data[s * d..(s + 1) * d];
            for j in 0..d {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = s;
                }
            }
        }
        let value = Tensor::from_vec(&[d], best)?;
        Ok(self.push(value, Op::PrefixMax { f, argmax }, &[f]))
    }

    /// Running maximum over time: row `t` equals `prefix_max_pool(f, t)`.
    pub fn running_max(&mut self, f: NodeId) -> Result<NodeId> {
        let fd = self.dims(f).to_vec();
        if fd.len() != 2 {
            return Err(Error::dim("running_max", &fd, &[0, 0]));
        }
        let (n, d) = (fd[0], fd[1]);
        let data = self.value(f).data();
        let mut out = Vec::with_capacity(n * d);
        let mut argmax = Vec::with_capacity(n * d);
        out.extend_from_slice(&data[..d]);
        argmax.extend(std::iter::repeat_n(0, d));
        for s in 1..n {
            for j in 0..d {
                let prev = out[(s - 1) * d + j];
                let cur = data[s * d + j];
                if cur > prev {
                    out.push(cur);
                    argmax.push(s);
                } else {
                    out.push(prev);
                    argmax.push(argmax[(s - 1) * d + j]);
                }
            }
        }
        let value = Tensor::from_vec(&fd, out)?;
        Ok(self.push(value, Op::RunningMax { f, argmax }, &[f]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |a| a.sigmoid());
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    fn map(&self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor::from_parts(src.shape().clone(), src.data().iter().map(|&a| f(a)).collect())
    }

    /// Softmax over the last axis, computed with row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        if src.shape().rank() > 2 {
            return Err(Error::dim("softmax_rows", src.dims(), &[0, 0]));
        }
        let (_, c) = src.shape().as_rows_cols();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(src.shape().clone(), out);
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        if src.shape().rank() > 2 {
            return Err(Error::dim("log_softmax_rows", src.dims(), &[0, 0]));
        }
        let (_, c) = src.shape().as_rows_cols();
        let mut out = src.data().to_vec();
        let mut probs = src.data().to_vec();
        for (row, prow) in out.chunks_mut(c).zip(probs.chunks_mut(c)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&a| (a - m).exp()).sum::<T>().ln();
            for (o, p) in row.iter_mut().zip(prow.iter_mut()) {
                *o -= lse;
                *p = o.exp();
            }
        }
        let value = Tensor::from_parts(src.shape().clone(), out);
        Ok(self.push(value, Op::LogSoftmaxRows { x, probs }, &[x]))
    }

    /// Order-preserving concatenation of 1-D feature vectors.
    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_features needs at least one part".into()));
        }
        if let Some(bad) = parts.iter().find(|&&p| self.dims(p).len() != 1) {
            return Err(Error::dim("concat_features", self.dims(*bad), &[0]));
        }
        self.concat_last(parts)
    }

    /// Concatenation along the last axis for vectors or equal-row matrices.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols needs at least one part".into()));
        }
        self.concat_last(parts)
    }

    fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.dims(parts[0]).to_vec();
        let rank = first.len();
        if rank > 2 {
            return Err(Error::dim("concat", &first, &[0, 0]));
        }
        let rows = if rank == 2 { first[0] } else { 1 };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            let ok = d.len() == rank && (rank == 1 || d[0] == rows);
            if !ok {
                return Err(Error::dim("concat", &first, d));
            }
            widths.push(d[rank - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let dims = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::from_vec(&dims, out)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows needs at least one part".into()));
        }
        let first = self.dims(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::dim("concat_rows", &first, &[0, 0]));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[1] != first[1] {
                return Err(Error::dim("concat_rows", &first, d));
            }
            rows += d[0];
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[rows, first[1]], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 || start + len > d[1] || len == 0 {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                len: *d.last().unwrap_or(&0),
            });
        }
        let (n, c) = (d[0], d[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let value = Tensor::from_vec(&[n, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 {
            return Err(Error::dim("gather_rows", &d, &[0, 0]));
        }
        if rows.is_empty() {
            return Err(Error::Argument("gather_rows needs at least one row".into()));
        }
        let c = d[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= d[0] {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    len: d[0],
                });
            }
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let value = Tensor::from_vec(&[rows.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks `x[r, cols[r]]` from every row of `[R×C]`, giving `[R]`.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        let (r, c) = self.value(x).shape().as_rows_cols();
        if d.len() > 2 || cols.len() != r {
            return Err(Error::dim("gather_cols", &d, &[cols.len()]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r);
        for (row, &col) in cols.iter().enumerate() {
            if col >= c {
                return Err(Error::Index {
                    op: "gather_cols",
                    index: col,
                    len: c,
                });
            }
            out.push(src[row * c + col]);
        }
        let value = Tensor::from_vec(&[r], out)?;
        Ok(self.push(
            value,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverted dropout: kept units are scaled by `1/(1−rate)`. Identity when
    /// not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_parts(src.shape().clone(), out);
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Batch normalization over rows of `[B×D]` (a `[D]` vector is one row)
    /// with learnable `gamma`/`beta`. Training uses batch statistics and
    /// updates `state`; inference uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<NodeId> {
        if training {
            self.batch_norm_train(x, gamma, beta, state)
        } else {
            self.batch_norm_infer(x, gamma, beta, state)
        }
    }

    fn check_bn(&self, x: NodeId, gamma: NodeId, beta: NodeId, state: &BatchNormState<T>) -> Result<(usize, usize)> {
        let xd = self.dims(x);
        let (b, d) = self.value(x).shape().as_rows_cols();
        if xd.len() > 2 || self.dims(gamma) != [d] || self.dims(beta) != [d] || state.running_mean.len() != d {
            return Err(Error::dim("batch_norm", xd, self.dims(gamma)));
        }
        Ok((b, d))
    }

    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
    ) -> Result<NodeId> {
        let (b, d) = self.check_bn(x, gamma, beta, state)?;
        if b < 2 {
            return Err(Error::VarianceDegenerate);
        }
        let src = self.value(x).data();
        let bt = T::lit(b as f64);
        let mut mean = vec![T::zero(); d];
        for row in src.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= bt);
        let mut var = vec![T::zero(); d];
        for row in src.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= bt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let (xhat, out) = self.normalize(src, d, &mean, &inv_std, gamma, beta);

        let m = state.momentum;
        let unbias = bt / (bt - T::one());
        for j in 0..d {
            state.running_mean[j] = m * state.running_mean[j] + (T::one() - m) * mean[j];
            state.running_var[j] = m * state.running_var[j] + (T::one() - m) * var[j] * unbias;
        }
        let value = Tensor::from_parts(self.value(x).shape().clone(), out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState<T>,
    ) -> Result<NodeId> {
        let (_, d) = self.check_bn(x, gamma, beta, state)?;
        let inv_std: Vec<T> = state
            .running_var
            .iter()
            .map(|&v| T::one() / (v + state.eps).sqrt())
            .collect();
        let src = self.value(x).data();
        let (xhat, out) = self.normalize(src, d, &state.running_mean, &inv_std, gamma, beta);
        let value = Tensor::from_parts(self.value(x).shape().clone(), out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn normalize(
        &self,
        src: &[T],
        d: usize,
        mean: &[T],
        inv_std: &[T],
        gamma: NodeId,
        beta: NodeId,
    ) -> (Vec<T>, Vec<T>) {
        let g = self.value(gamma).data();
        let bb = self.value(beta).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bb[j]);
            }
        }
        (xhat, out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(name, self.dims(a), self.dims(b)));
        }
        let va = self.value(a);
        let out = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok(Tensor::from_parts(va.shape().clone(), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale·x + shift` elementwise with constant `shift` of the same shape.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: &[T]) -> Result<NodeId> {
        let src = self.value(x);
        if shift.len() != src.len() {
            return Err(Error::dim("affine", src.dims(), &[shift.len()]));
        }
        let out = src
            .data()
            .iter()
            .zip(shift)
            .map(|(&a, &s)| scale * a + s)
            .collect();
        let v = Tensor::from_parts(src.shape().clone(), out);
        Ok(self.push(v, Op::Affine { x, scale }, &[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let n = self.value(x).len();
        self.affine(x, c, &vec![T::zero(); n])
            .expect("shift built with matching length")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let n = self.value(x).len();
        self.affine(x, T::one(), &vec![c; n])
            .expect("shift built with matching length")
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = crate::scalar::pairwise_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[T]) -> Result<NodeId> {
        let src = self.value(x);
        if weights.len() != src.len() {
            return Err(Error::dim("weighted_sum", src.dims(), &[weights.len()]));
        }
        let terms: Vec<T> = src.data().iter().zip(weights).map(|(&a, &w)| a * w).collect();
        let s = crate::scalar::pairwise_sum(&terms);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(dims)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Halting distribution for every segment of a stacked stop-probability
    /// vector `[R]`. The last entry of each segment is overridden to 1, and
    /// the other entries are clamped to `[HALT_CLAMP, 1−HALT_CLAMP]` inside
    /// the budget products.
    pub fn halting(&mut self, delta: NodeId, segments: &[Segment]) -> Result<NodeId> {
        let src = self.value(delta);
        if src.shape().rank() != 1 {
            return Err(Error::dim("halting", src.dims(), &[0]));
        }
        check_segments(segments, src.len(), "halting")?;
        let raw = src.data();
        let n = raw.len();
        let mut clamped = vec![T::one(); n];
        let mut active = vec![false; n];
        let mut budget_prev = vec![T::one(); n];
        let mut probs = vec![T::zero(); n];
        let lo = T::lit(HALT_CLAMP);
        let hi = T::one() - lo;
        for seg in segments {
            let mut budget = T::one();
            for i in seg.range() {
                budget_prev[i] = budget;
                if i + 1 == seg.end() {
                    probs[i] = budget;
                } else {
                    let d = raw[i];
                    active[i] = d >= lo && d <= hi;
                    let dc = d.max(lo).min(hi);
                    clamped[i] = dc;
                    probs[i] = dc * budget;
                    budget *= T::one() - dc;
                }
            }
        }
        let value = Tensor::from_vec(&[n], probs)?;
        Ok(self.push(
            value,
            Op::Halting {
                delta,
                segments: segments.to_vec(),
                clamped,
                active,
                budget_prev,
            },
            &[delta],
        ))
    }

    // ------------------------------------------------------------------
    // reverse sweep
    // ------------------------------------------------------------------

    /// Propagates `d root / d node` into every reachable node that requires
    /// gradients. `root` must hold exactly one value.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grads first".into(),
            ));
        }
        let root_dims = self.dims(root).to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {root_dims:?}"
            )));
        }
        self.backpropagated = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::filled(&root_dims, T::one())?);
        for i in (0..=root.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if let Some(op) = self.nodes[i].op.take() {
                let contributions = self.input_grads(NodeId(i), &op, grad.data());
                self.nodes[i].op = Some(op);
                for (id, g) in contributions {
                    self.accumulate(id, g);
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
        self.backpropagated = false;
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(e, v)| *e += v),
            None => node.grad = Some(Tensor::from_parts(node.value.shape().clone(), g)),
        }
    }

    fn input_grads(&self, out: NodeId, op: &Op<T>, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let y = self.value(out).data();
        let mut res = Vec::new();
        match op {
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).shape().as_rows_cols();
                let dout = self.dims(*w)[1];
                if self.needs(*x) {
                    res.push((*x, matmul_nt(g, n, dout, self.value(*w).data(), din)));
                }
                if self.needs(*w) {
                    res.push((*w, matmul_tn(self.value(*x).data(), n, din, g, dout)));
                }
                if self.needs(*b) {
                    res.push((*b, col_sums(g, dout)));
                }
            }
            Op::Conv1dCausal { x, k, b, cols } => {
                let (n, din) = (self.dims(*x)[0], self.dims(*x)[1]);
                let kd = self.dims(*k);
                let (w, dout) = (kd[0], kd[2]);
                if self.needs(*k) {
                    res.push((*k, matmul_tn(cols, n, w * din, g, dout)));
                }
                if self.needs(*b) {
                    res.push((*b, col_sums(g, dout)));
                }
                if self.needs(*x) {
                    let dcols = matmul_nt(g, n, dout, self.value(*k).data(), w * din);
                    res.push((*x, col2im(&dcols, n, din, w)));
                }
            }
            Op::PrefixMax { f, argmax } => {
                if self.needs(*f) {
                    let d = argmax.len();
                    let mut gf = vec![T::zero(); self.value(*f).len()];
                    for j in 0..d {
                        gf[argmax[j] * d + j] += g[j];
                    }
                    res.push((*f, gf));
                }
            }
            Op::RunningMax { f, argmax } => {
                if self.needs(*f) {
                    let d = self.dims(*f)[1];
                    let mut gf = vec![T::zero(); g.len()];
                    for (idx, (&src_t, &gv)) in argmax.iter().zip(g).enumerate() {
                        gf[src_t * d + idx % d] += gv;
                    }
                    res.push((*f, gf));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let gx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                    res.push((*x, gx));
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let gx = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                    res.push((*x, gx));
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (_, c) = self.value(out).shape().as_rows_cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        gx.extend(grow.iter().zip(yrow).map(|(&a, &b)| b * (a - dot)));
                    }
                    res.push((*x, gx));
                }
            }
            Op::LogSoftmaxRows { x, probs } => {
                if self.needs(*x) {
                    let (_, c) = self.value(out).shape().as_rows_cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, prow) in g.chunks(c).zip(probs.chunks(c)) {
                        let total: T = grow.iter().copied().sum();
                        gx.extend(grow.iter().zip(prow).map(|(&a, &p)| a - p * total));
                    }
                    res.push((*x, gx));
                }
            }
            Op::ConcatLast(parts) => {
                let od = self.dims(out);
                let (rows, total) = self.value(out).shape().as_rows_cols();
                debug_assert_eq!(od[od.len() - 1], total);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.dims(p).last().expect("non-empty");
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        res.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let c = self.dims(*x)[1];
                    let len = self.dims(out)[1];
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (r, grow) in g.chunks(len).enumerate() {
                        gx[r * c + start..r * c + start + len].copy_from_slice(grow);
                    }
                    res.push((*x, gx));
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let c = self.dims(*x)[1];
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[i * c + j];
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::GatherCols { x, cols } => {
                if self.needs(*x) {
                    let (_, c) = self.value(*x).shape().as_rows_cols();
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (r, &col) in cols.iter().enumerate() {
                        gx[r * c + col] += g[r];
                    }
                    res.push((*x, gx));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    res.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let d = inv_std.len();
                let rows = g.len() / d;
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let bt = T::lit(rows as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            let v = if *training {
                                gam[j] * inv_std[j] / bt
                                    * (bt * grow[j] - sum_g[j] - hrow[j] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * grow[j]
                            };
                            gx.push(v);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    res.push((*beta, sum_g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b).data();
                    res.push((*a, g.iter().zip(vb).map(|(&p, &q)| p * q).collect()));
                }
                if self.needs(*b) {
                    let va = self.value(*a).data();
                    res.push((*b, g.iter().zip(va).map(|(&p, &q)| p * q).collect()));
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    res.push((*x, g.iter().map(|&v| v * *scale).collect()));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    res.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    res.push((*x, weights.iter().map(|&w| w * g[0]).collect()));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    res.push((*x, g.to_vec()));
                }
            }
            Op::Halting {
                delta,
                segments,
                clamped,
                active,
                budget_prev,
            } => {
                if self.needs(*delta) {
                    let mut gd = vec![T::zero(); g.len()];
                    for seg in segments {
                        // suffix accumulates Σ_{t>τ} g_t · P(t)
                        let mut suffix = T::zero();
                        for i in seg.range().rev() {
                            if active[i] {
                                gd[i] = g[i] * budget_prev[i] - suffix / (T::one() - clamped[i]);
                            }
                            suffix += g[i] * y[i];
                        }
                    }
                    res.push((*delta, gd));
                }
            }
        }
        res
    }
}

pub(crate) fn check_segments(segments: &[Segment], total: usize, op: &'static str) -> Result<()> {
    let mut expected = 0;
    for s in segments {
        if s.len == 0 || s.start != expected {
            return Err(Error::Argument(format!(
                "{op}: segments must be non-empty and contiguous"
            )));
        }
        expected = s.end();
    }
    if expected != total {
        return Err(Error::dim(op, &[expected], &[total]));
    }
    Ok(())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn col_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

/// Row `t` holds frames `t−W+1 ..= t` (zeros before the start), flattened
/// as `[W×D]`.
fn im2col<T: Scalar>(x: &[T], n: usize, d: usize, w: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); n * w * d];
    for t in 0..n {
        for j in 0..w {
            let src = t as isize - (w as isize - 1) + j as isize;
            if src >= 0 {
                let s = src as usize;
                let dst = t * w * d + j * d;
                cols[dst..dst + d].copy_from_slice(&x[s * d..(s + 1) * d]);
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], n: usize, d: usize, w: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); n * d];
    for t in 0..n {
        for j in 0..w {
            let src = t as isize - (w as isize - 1) + j as isize;
            if src >= 0 {
                let s = src as usize;
                let off = t * w * d + j * d;
                for i in 0..d {
                    gx[s * d + i] += dcols[off + i];
                }
            }
        }
    }
    gx
}
