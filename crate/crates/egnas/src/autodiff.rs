//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of a forward pass and replays the
//! chain rule in reverse on [`Tape::backward`]. Tapes are rebuilt per
//! forward pass (define-by-run); learnable state lives in [`Param`]s that
//! outlive tapes and accumulate gradients across backward calls.
//!
//! Everything is 64-bit and single-threaded per tape. Beyond the usual
//! dense kernels (matmul, activations, softmax, batch norm) the tape has
//! the two graph-specific primitives message passing is built from:
//! [`Tape::gather_rows`] and [`Tape::segment_aggregate`].

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Dense row-major 2-D tensor. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "tensor data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data, requires_grad: false, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols], requires_grad: false, grad: None }
    }

    pub fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![1.0; rows * cols], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows: ragged input"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(rows.len(), cols, data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// Shared handle to a learnable tensor. Gradients accumulate here across
/// backward passes until [`Param::zero_grad`].
#[derive(Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(mut tensor: Tensor) -> Param {
        tensor.requires_grad = true;
        Param(Rc::new(RefCell::new(tensor)))
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Gradient as a dense vector, zeros if never touched by a backward pass.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let t = self.0.borrow();
        t.grad.clone().unwrap_or_else(|| vec![0.0; t.data.len()])
    }

    fn accumulate(&self, g: &[f64]) {
        let mut t = self.0.borrow_mut();
        match &mut t.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => t.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Sum,
    Mean,
    Max,
}

/// Running statistics for one batch-norm layer (not learnable).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(width: usize) -> BnState {
        BnState { running_mean: vec![0.0; width], running_var: vec![1.0; width] }
    }
}

enum Op {
    Leaf,
    Add { a: Var, b: Var, broadcast_b: bool },
    Sub { a: Var, b: Var, broadcast_b: bool },
    Mul { a: Var, b: Var, broadcast_b: bool },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    MatMul { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    SegmentAgg { a: Var, segments: Vec<usize>, mode: SegmentMode, counts: Vec<usize>, argmax: Vec<usize> },
    SoftmaxRows { a: Var },
    WeightedSum { weights: Var, items: Vec<Var> },
    SumAll { a: Var },
    Scale { a: Var, factor: f64 },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MaeLoss { pred: Var, sign: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
    param: Option<Param>,
}

/// Records operations in topological order; [`Tape::backward`] visits them
/// exactly once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a value that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.rows, t.cols, t.data, Op::Leaf, false, None)
            .expect("constant tensors are shape-consistent by construction")
    }

    /// Record the current value of a parameter; backward accumulates into it.
    pub fn leaf(&mut self, p: &Param) -> Var {
        let (rows, cols, data, rg) = {
            let t = p.value();
            (t.rows, t.cols, t.data.clone(), t.requires_grad)
        };
        self.push(rows, cols, data, Op::Leaf, rg, Some(p.clone()))
            .expect("parameter tensors are shape-consistent by construction")
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
        param: Option<Param>,
    ) -> Result<Var> {
        debug_assert_eq!(data.len(), rows * cols);
        #[cfg(debug_assertions)]
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value produced on tape".into()));
        }
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { rows, cols, data, grad, needs_grad, op, param });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { rows: n.rows, cols: n.cols, data: n.data.clone(), requires_grad: false, grad: None }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Elementwise kernels ──────────────────────────────────────────────

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> Result<bool> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar == br && ac == bc {
            Ok(false)
        } else if br == 1 && bc == ac {
            Ok(true)
        } else {
            Err(Error::shape(format!("{op}: {ar}x{ac} vs {br}x{bc}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary_shapes(a, b, "add")?;
        self.binary(a, b, broadcast, |x, y| x + y, |a, b, bc| Op::Add { a, b, broadcast_b: bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary_shapes(a, b, "sub")?;
        self.binary(a, b, broadcast, |x, y| x - y, |a, b, bc| Op::Sub { a, b, broadcast_b: bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary_shapes(a, b, "mul")?;
        self.binary(a, b, broadcast, |x, y| x * y, |a, b, bc| Op::Mul { a, b, broadcast_b: bc })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        broadcast_b: bool,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, bool) -> Op,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let mut out = vec![0.0; rows * cols];
        {
            let av = self.data(a);
            let bv = self.data(b);
            for r in 0..rows {
                for c in 0..cols {
                    let bi = if broadcast_b { c } else { r * cols + c };
                    out[r * cols + c] = f(av[r * cols + c], bv[bi]);
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(rows, cols, out, mk(a, b, broadcast_b), ng, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(rows, cols, out, Op::Relu { a }, ng, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let ng = self.needs(a);
        self.push(rows, cols, out, Op::Sigmoid { a }, ng, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(rows, cols, out, Op::Tanh { a }, ng, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * factor).collect();
        let ng = self.needs(a);
        self.push(rows, cols, out, Op::Scale { a, factor }, ng, None)
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} vs {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.data(a);
            let bv = self.data(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += aip * bb;
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(m, n, out, Op::MatMul { a, b }, ng, None)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar != br {
            return Err(Error::shape(format!("concat_cols: {ar} rows vs {br} rows")));
        }
        let cols = ac + bc;
        let mut out = vec![0.0; ar * cols];
        {
            let av = self.data(a);
            let bv = self.data(b);
            for r in 0..ar {
                out[r * cols..r * cols + ac].copy_from_slice(&av[r * ac..(r + 1) * ac]);
                out[r * cols + ac..(r + 1) * cols].copy_from_slice(&bv[r * bc..(r + 1) * bc]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(ar, cols, out, Op::ConcatCols { a, b }, ng, None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start + len > cols {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) out of width {cols}",
                start + len
            )));
        }
        let mut out = vec![0.0; rows * len];
        {
            let av = self.data(a);
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&av[r * cols + start..r * cols + start + len]);
            }
        }
        let ng = self.needs(a);
        self.push(rows, len, out, Op::SliceCols { a, start }, ng, None)
    }

    // ── Graph primitives ─────────────────────────────────────────────────

    /// Output row i is `src` row `index[i]`; backward scatter-adds, so
    /// duplicate indices accumulate.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let mut out = vec![0.0; index.len() * cols];
        {
            let sv = self.data(src);
            for (o, &i) in index.iter().enumerate() {
                out[o * cols..(o + 1) * cols].copy_from_slice(&sv[i * cols..(i + 1) * cols]);
            }
        }
        let ng = self.needs(src);
        self.push(index.len(), cols, out, Op::GatherRows { a: src, index: index.to_vec() }, ng, None)
    }

    /// Reduce value rows grouped by segment id. Empty segments yield zero
    /// rows in every mode; max gradients route to the first attaining row.
    pub fn segment_aggregate(
        &mut self,
        values: Var,
        segment_of_row: &[usize],
        num_segments: usize,
        mode: SegmentMode,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(values);
        if segment_of_row.len() != rows {
            return Err(Error::shape(format!(
                "segment_aggregate: {} segment ids for {rows} rows",
                segment_of_row.len()
            )));
        }
        if let Some(&bad) = segment_of_row.iter().find(|&&s| s >= num_segments) {
            return Err(Error::shape(format!(
                "segment_aggregate: segment id {bad} out of {num_segments}"
            )));
        }
        let mut out = vec![0.0; num_segments * cols];
        let mut counts = vec![0usize; num_segments];
        // usize::MAX marks "no attaining row" (empty segment).
        let mut argmax = vec![usize::MAX; num_segments * cols];
        {
            let vv = self.data(values);
            match mode {
                SegmentMode::Sum | SegmentMode::Mean => {
                    for (r, &s) in segment_of_row.iter().enumerate() {
                        counts[s] += 1;
                        for c in 0..cols {
                            out[s * cols + c] += vv[r * cols + c];
                        }
                    }
                    if mode == SegmentMode::Mean {
                        for s in 0..num_segments {
                            if counts[s] > 0 {
                                let inv = 1.0 / counts[s] as f64;
                                for c in 0..cols {
                                    out[s * cols + c] *= inv;
                                }
                            }
                        }
                    }
                }
                SegmentMode::Max => {
                    for (r, &s) in segment_of_row.iter().enumerate() {
                        counts[s] += 1;
                        for c in 0..cols {
                            let v = vv[r * cols + c];
                            let slot = s * cols + c;
                            if argmax[slot] == usize::MAX || v > out[slot] {
                                out[slot] = v;
                                argmax[slot] = r;
                            }
                        }
                    }
                    // Empty segments stay all-zero.
                }
            }
        }
        let ng = self.needs(values);
        self.push(
            num_segments,
            cols,
            out,
            Op::SegmentAgg { a: values, segments: segment_of_row.to_vec(), mode, counts, argmax },
            ng,
            None,
        )
    }

    // ── Reductions and distributions ─────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let mut out = vec![0.0; rows * cols];
        {
            let av = self.data(a);
            for r in 0..rows {
                let row = &av[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    out[r * cols + c] /= sum;
                }
            }
        }
        let ng = self.needs(a);
        self.push(rows, cols, out, Op::SoftmaxRows { a }, ng, None)
    }

    /// `sum_k weights[0,k] * items[k]`, with gradients to both sides.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let (wr, wc) = self.dims(weights);
        if wr != 1 || wc != items.len() || items.is_empty() {
            return Err(Error::shape(format!(
                "weighted_sum: weights {wr}x{wc} for {} items",
                items.len()
            )));
        }
        let (rows, cols) = self.dims(items[0]);
        for &it in items {
            if self.dims(it) != (rows, cols) {
                return Err(Error::shape("weighted_sum: item shapes differ"));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (k, &it) in items.iter().enumerate() {
            let w = self.data(weights)[k];
            let iv = self.data(it);
            for (o, v) in out.iter_mut().zip(iv) {
                *o += w * v;
            }
        }
        let ng = self.needs(weights) || items.iter().any(|&i| self.needs(i));
        self.push(rows, cols, out, Op::WeightedSum { weights, items: items.to_vec() }, ng, None)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![total], Op::SumAll { a }, ng, None)
    }

    // ── Normalization ────────────────────────────────────────────────────

    /// Batch normalization per column. Training mode normalizes by batch
    /// statistics and updates `state` (momentum 0.1); eval mode uses the
    /// running statistics. `gamma`/`beta` are 1-row scale/shift.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.dims(gamma) != (1, cols) || self.dims(beta) != (1, cols) {
            return Err(Error::shape(format!("batch_norm: scale/shift must be 1x{cols}")));
        }
        if state.running_mean.len() != cols {
            return Err(Error::shape(format!(
                "batch_norm: state width {} != {cols}",
                state.running_mean.len()
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; cols];
        let mut out = vec![0.0; rows * cols];
        {
            let xv = self.data(x);
            let gv = self.data(gamma);
            let bv = self.data(beta);
            if training && rows > 0 {
                let n = rows as f64;
                for c in 0..cols {
                    let mut mean = 0.0;
                    for r in 0..rows {
                        mean += xv[r * cols + c];
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for r in 0..rows {
                        let d = xv[r * cols + c] - mean;
                        var += d * d;
                    }
                    var /= n;
                    inv_std[c] = 1.0 / (var + BN_EPS).sqrt();
                    for r in 0..rows {
                        xhat[r * cols + c] = (xv[r * cols + c] - mean) * inv_std[c];
                    }
                    state.running_mean[c] = (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean;
                    state.running_var[c] = (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var;
                }
            } else {
                for c in 0..cols {
                    inv_std[c] = 1.0 / (state.running_var[c] + BN_EPS).sqrt();
                    for r in 0..rows {
                        xhat[r * cols + c] = (xv[r * cols + c] - state.running_mean[c]) * inv_std[c];
                    }
                }
            }
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = gv[c] * xhat[r * cols + c] + bv[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            rows,
            cols,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training: training && rows > 0 },
            ng,
            None,
        )
    }

    // ── Losses ───────────────────────────────────────────────────────────

    /// Mean softmax cross-entropy over rows, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if labels.len() != rows {
            return Err(Error::shape(format!("cross_entropy: {} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::shape(format!("cross_entropy: label {bad} out of {cols} classes")));
        }
        if rows == 0 {
            return Err(Error::shape("cross_entropy: empty batch"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        {
            let lv = self.data(logits);
            for r in 0..rows {
                let row = &lv[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - max).exp();
                    probs[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    probs[r * cols + c] /= sum;
                }
                let lse = max + sum.ln();
                loss += lse - row[labels[r]];
            }
        }
        loss /= rows as f64;
        let ng = self.needs(logits);
        self.push(1, 1, vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng, None)
    }

    /// Mean absolute error against a constant target.
    pub fn mae_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let (rows, cols) = self.dims(pred);
        if (target.rows, target.cols) != (rows, cols) {
            return Err(Error::shape(format!(
                "mae_loss: prediction {rows}x{cols} vs target {}x{}",
                target.rows, target.cols
            )));
        }
        if rows * cols == 0 {
            return Err(Error::shape("mae_loss: empty batch"));
        }
        let mut sign = vec![0.0; rows * cols];
        let mut loss = 0.0;
        {
            let pv = self.data(pred);
            for i in 0..rows * cols {
                let d = pv[i] - target.data[i];
                loss += d.abs();
                sign[i] = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        loss /= (rows * cols) as f64;
        let ng = self.needs(pred);
        self.push(1, 1, vec![loss], Op::MaeLoss { pred, sign }, ng, None)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every reachable
    /// [`Param`]; repeated calls without `zero_grad` accumulate there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::shape(format!("backward: loss must be 1x1, got {r}x{c}")));
        }
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            if g.iter().all(|&v| v == 0.0) {
                if !matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
            }
            let cols = self.nodes[i].cols;
            let rows = self.nodes[i].rows;
            match &self.nodes[i].op {
                Op::Leaf => {
                    if let Some(p) = self.nodes[i].param.clone() {
                        p.accumulate(&g);
                    }
                }
                Op::Add { a, b, broadcast_b } => {
                    let (a, b, bb) = (*a, *b, *broadcast_b);
                    self.add_into(a, &g);
                    if bb {
                        self.add_into_colsum(b, &g, rows, cols, 1.0);
                    } else {
                        self.add_into(b, &g);
                    }
                }
                Op::Sub { a, b, broadcast_b } => {
                    let (a, b, bb) = (*a, *b, *broadcast_b);
                    self.add_into(a, &g);
                    if bb {
                        self.add_into_colsum(b, &g, rows, cols, -1.0);
                    } else {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        self.add_into(b, &neg);
                    }
                }
                Op::Mul { a, b, broadcast_b } => {
                    let (a, b, bb) = (*a, *b, *broadcast_b);
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for rr in 0..rows {
                        for cc in 0..cols {
                            let gi = rr * cols + cc;
                            let bi = if bb { cc } else { gi };
                            da[gi] = g[gi] * bv[bi];
                            db[bi] += g[gi] * av[gi];
                        }
                    }
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let da: Vec<f64> = self.nodes[i]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gg)| if y > 0.0 { gg } else { 0.0 })
                        .collect();
                    self.add_into(a, &da);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let da: Vec<f64> =
                        self.nodes[i].data.iter().zip(&g).map(|(&y, &gg)| gg * y * (1.0 - y)).collect();
                    self.add_into(a, &da);
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let da: Vec<f64> =
                        self.nodes[i].data.iter().zip(&g).map(|(&y, &gg)| gg * (1.0 - y * y)).collect();
                    self.add_into(a, &da);
                }
                Op::Scale { a, factor } => {
                    let (a, f) = (*a, *factor);
                    let da: Vec<f64> = g.iter().map(|v| v * f).collect();
                    self.add_into(a, &da);
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = cols;
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for ii in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[ii * n + j] * bv[p * n + j];
                            }
                            da[ii * k + p] = s;
                        }
                    }
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for ii in 0..m {
                        for p in 0..k {
                            let aip = av[ii * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[ii * n + j];
                            }
                        }
                    }
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ac = self.nodes[a.0].cols;
                    let bc = self.nodes[b.0].cols;
                    let mut da = vec![0.0; rows * ac];
                    let mut db = vec![0.0; rows * bc];
                    for rr in 0..rows {
                        da[rr * ac..(rr + 1) * ac].copy_from_slice(&g[rr * cols..rr * cols + ac]);
                        db[rr * bc..(rr + 1) * bc].copy_from_slice(&g[rr * cols + ac..(rr + 1) * cols]);
                    }
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let ac = self.nodes[a.0].cols;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for rr in 0..rows {
                        da[rr * ac + start..rr * ac + start + cols]
                            .copy_from_slice(&g[rr * cols..(rr + 1) * cols]);
                    }
                    self.add_into(a, &da);
                }
                Op::GatherRows { a, index } => {
                    let a = *a;
                    let index = index.clone();
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for (o, &src_row) in index.iter().enumerate() {
                        for cc in 0..cols {
                            da[src_row * cols + cc] += g[o * cols + cc];
                        }
                    }
                    self.add_into(a, &da);
                }
                Op::SegmentAgg { a, segments, mode, counts, argmax } => {
                    let a = *a;
                    let segments = segments.clone();
                    let mode = *mode;
                    let counts = counts.clone();
                    let argmax = argmax.clone();
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    match mode {
                        SegmentMode::Sum => {
                            for (rr, &s) in segments.iter().enumerate() {
                                for cc in 0..cols {
                                    da[rr * cols + cc] = g[s * cols + cc];
                                }
                            }
                        }
                        SegmentMode::Mean => {
                            for (rr, &s) in segments.iter().enumerate() {
                                let inv = 1.0 / counts[s] as f64;
                                for cc in 0..cols {
                                    da[rr * cols + cc] = g[s * cols + cc] * inv;
                                }
                            }
                        }
                        SegmentMode::Max => {
                            for s in 0..rows {
                                for cc in 0..cols {
                                    let slot = s * cols + cc;
                                    if argmax[slot] != usize::MAX {
                                        da[argmax[slot] * cols + cc] += g[slot];
                                    }
                                }
                            }
                        }
                    }
                    self.add_into(a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let y = self.nodes[i].data.clone();
                    let mut da = vec![0.0; y.len()];
                    for rr in 0..rows {
                        let mut dot = 0.0;
                        for cc in 0..cols {
                            dot += g[rr * cols + cc] * y[rr * cols + cc];
                        }
                        for cc in 0..cols {
                            let idx = rr * cols + cc;
                            da[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                    self.add_into(a, &da);
                }
                Op::WeightedSum { weights, items } => {
                    let weights = *weights;
                    let items = items.clone();
                    let wv = self.nodes[weights.0].data.clone();
                    let mut dw = vec![0.0; wv.len()];
                    for (k, &it) in items.iter().enumerate() {
                        let iv = self.nodes[it.0].data.clone();
                        dw[k] = iv.iter().zip(&g).map(|(a, b)| a * b).sum();
                        if self.nodes[it.0].needs_grad {
                            let da: Vec<f64> = g.iter().map(|v| v * wv[k]).collect();
                            self.add_into(it, &da);
                        }
                    }
                    self.add_into(weights, &dw);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.add_into(a, &da);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let training = *training;
                    let gv = self.nodes[gamma.0].data.clone();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for rr in 0..rows {
                        for cc in 0..cols {
                            let idx = rr * cols + cc;
                            dgamma[cc] += g[idx] * xhat[idx];
                            dbeta[cc] += g[idx];
                        }
                    }
                    let mut dx = vec![0.0; rows * cols];
                    if training {
                        let n = rows as f64;
                        for cc in 0..cols {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for rr in 0..rows {
                                let idx = rr * cols + cc;
                                let dxh = g[idx] * gv[cc];
                                m1 += dxh;
                                m2 += dxh * xhat[idx];
                            }
                            m1 /= n;
                            m2 /= n;
                            for rr in 0..rows {
                                let idx = rr * cols + cc;
                                let dxh = g[idx] * gv[cc];
                                dx[idx] = inv_std[cc] * (dxh - m1 - xhat[idx] * m2);
                            }
                        }
                    } else {
                        for rr in 0..rows {
                            for cc in 0..cols {
                                let idx = rr * cols + cc;
                                dx[idx] = g[idx] * gv[cc] * inv_std[cc];
                            }
                        }
                    }
                    self.add_into(x, &dx);
                    self.add_into(gamma, &dgamma);
                    self.add_into(beta, &dbeta);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let (lr, lc) = (self.nodes[logits.0].rows, self.nodes[logits.0].cols);
                    let gs = g[0] / lr as f64;
                    let mut dl = vec![0.0; lr * lc];
                    for rr in 0..lr {
                        for cc in 0..lc {
                            let idx = rr * lc + cc;
                            let onehot = if labels[rr] == cc { 1.0 } else { 0.0 };
                            dl[idx] = gs * (probs[idx] - onehot);
                        }
                    }
                    self.add_into(logits, &dl);
                }
                Op::MaeLoss { pred, sign } => {
                    let pred = *pred;
                    let sign = sign.clone();
                    let gs = g[0] / sign.len() as f64;
                    let dp: Vec<f64> = sign.iter().map(|s| s * gs).collect();
                    self.add_into(pred, &dp);
                }
            }
        }
        Ok(())
    }

    fn add_into(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let grad = &mut self.nodes[v.0].grad;
        for (a, b) in grad.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn add_into_colsum(&mut self, v: Var, g: &[f64], rows: usize, cols: usize, sign: f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let grad = &mut self.nodes[v.0].grad;
        for r in 0..rows {
            for c in 0..cols {
                grad[c] += sign * g[r * cols + c];
            }
        }
    }
}
