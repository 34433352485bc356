//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node to the tape. Node indices are therefore a
//! topological order, and the backward sweep simply walks the tape from the
//! loss node down to index 0.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Argument floor applied by [`Graph::log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Variance floor inside batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics batch normalization normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Statistics of the current batch (biased variance).
    Batch,
    /// Externally supplied running estimates.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-feature moments of a batch, reported by [`Graph::batch_norm`] in batch mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, broadcast_rows: bool },
    Scale { x: Var, factor: f64 },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softmax { x: Var, cols: usize },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize, rows: usize, cols: usize },
    MeanAxis { x: Var, axis: usize, rows: usize, cols: usize },
    ConcatCols { a: Var, b: Var, rows: usize, left: usize, right: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    WeightNormLinear { x: Var, direction: Var, magnitude: Var, bias: Var, weight: Vec<f64>, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations supporting a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::contract(format!("{op}: {detail}"))
}

fn add_into(acc: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match acc {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *acc = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records an untracked input regardless of its `requires_grad` flag.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let tensor = tensor.with_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.ndim() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// Elementwise sum. `b` may also be a vector whose length equals the
    /// column count of matrix `a`; it is then added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let broadcast_rows = if at.shape() == bt.shape() {
            false
        } else if at.ndim() == 2 && bt.ndim() == 1 && bt.numel() == at.cols() {
            true
        } else {
            return Err(shape_err("add", format!("shapes {:?} and {:?}", at.shape(), bt.shape())));
        };
        let mut out = at.data().to_vec();
        if broadcast_rows {
            let c = at.cols();
            for row in out.chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
        } else {
            for (o, &bv) in out.iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        let shape = at.shape().to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b, broadcast_rows }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale { x, factor }, tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("mul", format!("shapes {:?} and {:?}", at.shape(), bt.shape())));
        }
        let out: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let shape = at.shape().to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, tracked))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), op, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log { x })
    }

    /// Row-wise softmax of a `[batch, K]` matrix, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "softmax")?;
        if cols < 2 {
            return Err(shape_err("softmax", format!("need at least 2 classes, got {cols}")));
        }
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NumericInput("softmax received non-finite logits".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Softmax { x, cols }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, tracked)
    }

    fn reduce_axis(&self, x: Var, axis: usize, op: &str) -> Result<(usize, usize, Vec<f64>)> {
        let (rows, cols) = self.matrix_dims(x, op)?;
        let d = self.value(x).data();
        let out = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for row in d.chunks(cols) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
            1 => d.chunks(cols).map(|row| row.iter().sum()).collect(),
            _ => return Err(shape_err(op, format!("axis {axis} out of range for a matrix"))),
        };
        Ok((rows, cols, out))
    }

    /// Sums a matrix along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols, out) = self.reduce_axis(x, axis, "sum_axis")?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::vector(out), Op::SumAxis { x, axis, rows, cols }, tracked))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols, mut out) = self.reduce_axis(x, axis, "mean_axis")?;
        let count = if axis == 0 { rows } else { cols };
        if count == 0 {
            return Err(shape_err("mean_axis", "empty reduction".into()));
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanAxis { x, axis, rows, cols }, tracked))
    }

    /// `[n, p] ++ [n, q] -> [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, left) = self.matrix_dims(a, "concat_cols")?;
        let (rows_b, right) = self.matrix_dims(b, "concat_cols")?;
        if rows != rows_b {
            return Err(shape_err("concat_cols", format!("row counts {rows} and {rows_b} differ")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (left + right));
        for i in 0..rows {
            out.extend_from_slice(&ad[i * left..(i + 1) * left]);
            out.extend_from_slice(&bd[i * right..(i + 1) * right]);
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![rows, left + right], out)?,
            Op::ConcatCols { a, b, rows, left, right },
            tracked,
        ))
    }

    /// Per-feature normalization of `x: [n, d]` followed by the affine map
    /// `gamma * x_hat + beta`. Returns the batch moments when normalizing with
    /// batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (n, d) = self.matrix_dims(x, "batch_norm")?;
        if n == 0 {
            return Err(shape_err("batch_norm", "empty batch".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != d {
                return Err(shape_err("batch_norm", format!("{name} must have {d} entries")));
            }
        }
        let xd = self.value(x).data();
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; d];
                for row in xd.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in xd.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let moments = BatchMoments { mean: mean.clone(), var: var.clone(), count: n };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err("batch_norm", format!("running stats must have {d} entries")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let xh = (xd[i * d + j] - mean[j]) * inv_std[j];
                normalized[i * d + j] = xh;
                out[i * d + j] = gd[j] * xh + bd[j];
            }
        }
        let tracked = self.tracked_any(&[x, gamma, beta]);
        let batch = moments.is_some();
        let var_out = self.push(
            Tensor::new(vec![n, d], out)?,
            Op::BatchNorm { x, gamma, beta, normalized, inv_std, batch },
            tracked,
        );
        Ok((var_out, moments))
    }

    /// Linear layer `x W^T + bias` with `W[k] = magnitude[k] * direction[k] / |direction[k]|`.
    pub fn weight_norm_linear(&mut self, x: Var, direction: Var, magnitude: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "weight_norm_linear")?;
        let (k, d2) = self.matrix_dims(direction, "weight_norm_linear")?;
        if d != d2 {
            return Err(shape_err("weight_norm_linear", format!("input width {d} vs direction width {d2}")));
        }
        if self.value(magnitude).numel() != k || self.value(bias).numel() != k {
            return Err(shape_err("weight_norm_linear", format!("magnitude and bias need {k} entries")));
        }
        let vd = self.value(direction).data();
        let gd = self.value(magnitude).data();
        let norms: Vec<f64> = vd.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.contains(&0.0) {
            return Err(Error::NumericInput("weight-normalized direction row has zero norm".into()));
        }
        let mut weight = vec![0.0; k * d];
        for c in 0..k {
            let s = gd[c] / norms[c];
            for j in 0..d {
                weight[c * d + j] = s * vd[c * d + j];
            }
        }
        let (xd, bd) = (self.value(x).data(), self.value(bias).data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let xr = &xd[i * d..(i + 1) * d];
            for c in 0..k {
                let w = &weight[c * d..(c + 1) * d];
                out[i * k + c] = xr.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + bd[c];
            }
        }
        let tracked = self.tracked_any(&[x, direction, magnitude, bias]);
        Ok(self.push(
            Tensor::new(vec![n, k], out)?,
            Op::WeightNormLinear { x, direction, magnitude, bias, weight, norms },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every tracked leaf holds
    /// a gradient (zeros if it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, contribution: Vec<f64>| {
                if self.nodes[v.0].tracked {
                    add_into(&mut grads[v.0], contribution);
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    if self.nodes[a.0].tracked {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].tracked {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                    *o += aip * gv;
                                }
                            }
                        }
                        send(&mut grads, *b, gb);
                    }
                }
                Op::Add { a, b, broadcast_rows } => {
                    if *broadcast_rows {
                        let c = self.value(*b).numel();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        send(&mut grads, *b, gb);
                    } else {
                        send(&mut grads, *b, g.clone());
                    }
                    send(&mut grads, *a, g);
                }
                Op::Scale { x, factor } => {
                    send(&mut grads, *x, g.iter().map(|v| v * factor).collect());
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    send(&mut grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                    send(&mut grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    send(&mut grads, *x, g.iter().zip(xd).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect());
                }
                Op::Exp { x } => {
                    let y = node.value.data();
                    send(&mut grads, *x, g.iter().zip(y).map(|(a, b)| a * b).collect());
                }
                Op::Log { x } => {
                    let xd = self.value(*x).data();
                    send(
                        &mut grads,
                        *x,
                        g.iter().zip(xd).map(|(gv, &v)| if v > LOG_CLAMP { gv / v } else { 0.0 }).collect(),
                    );
                }
                Op::Softmax { x, cols } => {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(*cols).zip(g.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(&mut grads, *x, gx);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    send(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean { x } => {
                    let n = self.value(*x).numel();
                    send(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::SumAxis { x, axis, rows, cols } | Op::MeanAxis { x, axis, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let divisor = match (&node.op, axis) {
                        (Op::MeanAxis { .. }, 0) => rows as f64,
                        (Op::MeanAxis { .. }, _) => cols as f64,
                        _ => 1.0,
                    };
                    let mut gx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let up = if *axis == 0 { g[j] } else { g[i] };
                            gx[i * cols + j] = up / divisor;
                        }
                    }
                    send(&mut grads, *x, gx);
                }
                Op::ConcatCols { a, b, rows, left, right } => {
                    let w = left + right;
                    let mut ga = Vec::with_capacity(rows * left);
                    let mut gb = Vec::with_capacity(rows * right);
                    for row in g.chunks(w) {
                        ga.extend_from_slice(&row[..*left]);
                        gb.extend_from_slice(&row[*left..]);
                    }
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::BatchNorm { x, gamma, beta, normalized, inv_std, batch } => {
                    let d = inv_std.len();
                    let n = normalized.len() / d;
                    let gd = self.value(*gamma).data();
                    let mut sum_g = vec![0.0; d];
                    let mut sum_g_xh = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            sum_g[j] += gr[j];
                            sum_g_xh[j] += gr[j] * xr[j];
                        }
                    }
                    if self.nodes[x.0].tracked {
                        let mut gx = vec![0.0; n * d];
                        for i in 0..n {
                            for j in 0..d {
                                let gij = g[i * d + j];
                                gx[i * d + j] = if *batch {
                                    gd[j] * inv_std[j] / n as f64
                                        * (n as f64 * gij - sum_g[j] - normalized[i * d + j] * sum_g_xh[j])
                                } else {
                                    gd[j] * inv_std[j] * gij
                                };
                            }
                        }
                        send(&mut grads, *x, gx);
                    }
                    send(&mut grads, *gamma, sum_g_xh);
                    send(&mut grads, *beta, sum_g);
                }
                Op::WeightNormLinear { x, direction, magnitude, bias, weight, norms } => {
                    let k = norms.len();
                    let d = weight.len() / k;
                    let n = g.len() / k;
                    let xd = self.value(*x).data();
                    if self.nodes[x.0].tracked {
                        let mut gx = vec![0.0; n * d];
                        for i in 0..n {
                            for c in 0..k {
                                let gv = g[i * k + c];
                                for j in 0..d {
                                    gx[i * d + j] += gv * weight[c * d + j];
                                }
                            }
                        }
                        send(&mut grads, *x, gx);
                    }
                    let mut gb = vec![0.0; k];
                    let mut gw = vec![0.0; k * d];
                    for i in 0..n {
                        for c in 0..k {
                            let gv = g[i * k + c];
                            gb[c] += gv;
                            for j in 0..d {
                                gw[c * d + j] += gv * xd[i * d + j];
                            }
                        }
                    }
                    let vd = self.value(*direction).data();
                    let md = self.value(*magnitude).data();
                    let mut gm = vec![0.0; k];
                    let mut gv_dir = vec![0.0; k * d];
                    for c in 0..k {
                        let norm = norms[c];
                        let gw_row = &gw[c * d..(c + 1) * d];
                        let v_row = &vd[c * d..(c + 1) * d];
                        let proj: f64 = gw_row.iter().zip(v_row).map(|(a, b)| a * b).sum::<f64>() / norm;
                        gm[c] = proj;
                        for j in 0..d {
                            gv_dir[c * d + j] = md[c] / norm * (gw_row[j] - proj * v_row[j] / norm);
                        }
                    }
                    send(&mut grads, *direction, gv_dir);
                    send(&mut grads, *magnitude, gm);
                    send(&mut grads, *bias, gb);
                }
            }
        }

        for (idx, g) in leaf_grads {
            self.nodes[idx].value.set_grad(g);
        }
        for node in &mut self.nodes {
            if node.tracked && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        Ok(())
    }
}
