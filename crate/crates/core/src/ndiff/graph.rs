use std::borrow::Cow;

use super::kernels::{self, AttnShape};
use super::{NdError, NdResult, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, bt: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Sum { a: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f32>, rstd: Vec<f32> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    Softmax { a: Var },
    SoftCrossEntropy { logits: Var, target: Vec<f32>, probs: Vec<f32> },
    Nll { logits: Var, targets: Vec<Option<usize>>, count: usize, probs: Vec<f32> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for backward. Leaves may borrow their value (model
/// weights) or own it (inputs, perturbations). Every op rejects non-finite
/// outputs.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> NdResult<Var> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// Owned value that does not receive gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed value that does not receive gradients.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf that receives gradients.
    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> NdResult<(usize, usize)> {
        let t = self.val(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(NdError::Shape { op, detail: format!("expected a matrix, got {s:?}") }),
        }
    }

    /// `a[m x k] · b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> NdResult<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NdError::Shape {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul", t, Op::MatMul { a, b, bt: false }, &[a, b])
    }

    /// `a[m x k] · b[n x k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> NdResult<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(NdError::Shape {
                op: "matmul_bt",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), true, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul_bt", t, Op::MatMul { a, b, bt: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> NdResult<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(NdError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("add", t, Op::Add { a, b }, &[a, b])
    }

    /// Adds a `[n]` bias to every row of `a[.. x n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> NdResult<Var> {
        let (ta, tb) = (self.val(a), self.val(bias));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(NdError::Shape {
                op: "add_row",
                detail: format!("bias {:?} for width {n}", tb.shape()),
            });
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("add_row", t, Op::AddRow { a, bias }, &[a, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> NdResult<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(NdError::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> NdResult<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("scale", t, Op::Scale { a, s }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> NdResult<Var> {
        let s: f64 = self.val(a).data().iter().map(|&v| v as f64).sum();
        self.push_op("sum", Tensor::scalar(s as f32), Op::Sum { a }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> NdResult<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("gelu", t, Op::Gelu { a }, &[a])
    }

    /// Normalizes each last-dim slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> NdResult<Var> {
        let tx = self.val(x);
        let n = tx.cols();
        let (tg, tb) = (self.val(gain), self.val(bias));
        if tg.numel() != n || tb.numel() != n {
            return Err(NdError::Shape {
                op: "layer_norm",
                detail: format!("gain {:?} bias {:?} for width {n}", tg.shape(), tb.shape()),
            });
        }
        if !(eps > 0.0) {
            return Err(NdError::Shape { op: "layer_norm", detail: format!("eps must be > 0, got {eps}") });
        }
        if n == 0 {
            return Err(NdError::EmptyDim { op: "layer_norm" });
        }
        let mut out = vec![0.0; tx.numel()];
        let (mean, rstd) = kernels::layer_norm_forward(tx.data(), n, tg.data(), tb.data(), eps, &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push_op("layer_norm", t, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias])
    }

    /// Selects rows of `table[V x d]`, producing `[ids.len() x d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> NdResult<Var> {
        let (v, d) = self.matrix_dims("gather", table)?;
        let tt = self.val(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(NdError::IndexOutOfRange { op: "gather", index: i, bound: v });
            }
            out.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push_op("gather", t, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> NdResult<Var> {
        let first = *parts.first().ok_or(NdError::EmptyDim { op: "concat_rows" })?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(NdError::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {cols} vs {c}"),
                });
            }
            rows += r;
            data.extend_from_slice(self.val(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push_op("concat_rows", t, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Causal multi-head scaled dot-product attention (see [`AttnShape`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> NdResult<Var> {
        let w = shape.width();
        let expect = |t: &Tensor, rows: usize| t.shape() == [rows, w];
        if !expect(self.val(q), shape.batch * shape.q_len)
            || !expect(self.val(k), shape.batch * shape.k_len)
            || !expect(self.val(v), shape.batch * shape.k_len)
        {
            return Err(NdError::Shape {
                op: "attention",
                detail: format!(
                    "q {:?} k {:?} v {:?} for {shape:?}",
                    self.val(q).shape(),
                    self.val(k).shape(),
                    self.val(v).shape()
                ),
            });
        }
        if shape.k_len == 0 {
            return Err(NdError::EmptyDim { op: "attention" });
        }
        let mut out = vec![0.0; shape.batch * shape.q_len * w];
        let probs =
            kernels::attention_forward(&shape, self.val(q).data(), self.val(k).data(), self.val(v).data(), &mut out);
        let t = Tensor::new(vec![shape.batch * shape.q_len, w], out)?;
        self.push_op("attention", t, Op::Attention { q, k, v, shape, probs }, &[q, k, v])
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> NdResult<Var> {
        let ta = self.val(a);
        let n = ta.cols();
        if n == 0 {
            return Err(NdError::EmptyDim { op: "softmax" });
        }
        let mut out = vec![0.0; ta.numel()];
        for (xs, os) in ta.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_into(xs, os);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push_op("softmax", t, Op::Softmax { a }, &[a])
    }

    /// Mean over rows of `-Σ_v target[v] · log softmax(logits)[v]`.
    ///
    /// `target` must match the logits' shape and each row must be a
    /// distribution; it is treated as a constant.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> NdResult<Var> {
        let tl = self.val(logits);
        let n = tl.cols();
        if n == 0 {
            return Err(NdError::EmptyDim { op: "soft_cross_entropy" });
        }
        if target.numel() != tl.numel() {
            return Err(NdError::Shape {
                op: "soft_cross_entropy",
                detail: format!("target {:?} for logits {:?}", target.shape(), tl.shape()),
            });
        }
        for row in target.data().chunks(n) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(NdError::NotNormalized { op: "soft_cross_entropy", sum: s });
            }
        }
        let rows = tl.rows();
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0f64;
        for ((xs, ts), ps) in tl.data().chunks(n).zip(target.data().chunks(n)).zip(probs.chunks_mut(n)) {
            let lse = kernels::log_sum_exp(xs);
            kernels::softmax_into(xs, ps);
            total -= xs.iter().zip(ts).map(|(&x, &t)| t as f64 * (x as f64 - lse)).sum::<f64>();
        }
        let value = Tensor::scalar((total / rows as f64) as f32);
        let op = Op::SoftCrossEntropy { logits, target: target.data().to_vec(), probs };
        self.push_op("soft_cross_entropy", value, op, &[logits])
    }

    /// Mean negative log-likelihood of integer targets over the rows whose
    /// target is `Some`.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>]) -> NdResult<Var> {
        let tl = self.val(logits);
        let n = tl.cols();
        if tl.rows() != targets.len() {
            return Err(NdError::Shape {
                op: "nll",
                detail: format!("{} targets for {} rows", targets.len(), tl.rows()),
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if n == 0 || count == 0 {
            return Err(NdError::EmptyDim { op: "nll" });
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0f64;
        for ((xs, t), ps) in tl.data().chunks(n).zip(targets).zip(probs.chunks_mut(n)) {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(NdError::IndexOutOfRange { op: "nll", index: t, bound: n });
            }
            total += kernels::log_sum_exp(xs) - xs[t] as f64;
            kernels::softmax_into(xs, ps);
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        let op = Op::Nll { logits, targets: targets.to_vec(), count, probs };
        self.push_op("nll", value, op, &[logits])
    }

    /// Mean of each row range `[start, end)` of `x`, one output row per range.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> NdResult<Var> {
        let (rows, d) = self.matrix_dims("segment_mean", x)?;
        let tx = self.val(x);
        let mut out = Vec::with_capacity(segments.len() * d);
        for &(s, e) in segments {
            if s >= e || e > rows {
                return Err(NdError::Shape {
                    op: "segment_mean",
                    detail: format!("segment {s}..{e} of {rows} rows"),
                });
            }
            let mut acc = vec![0.0f64; d];
            for r in s..e {
                for (a, &v) in acc.iter_mut().zip(tx.row_slice(r)) {
                    *a += v as f64;
                }
            }
            let len = (e - s) as f64;
            out.extend(acc.into_iter().map(|a| (a / len) as f32));
        }
        let t = Tensor::new(vec![segments.len(), d], out)?;
        self.push_op("segment_mean", t, Op::SegmentMean { x, segments: segments.to_vec() }, &[x])
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients are added to whatever each node already holds, so calling
    /// this twice without [`Graph::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> NdResult<()> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(NdError::NotScalar { shape: lt.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, bt } => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if bt { tb.shape()[0] } else { tb.shape()[1] };
                if wants(a) {
                    // dA = dC · Bᵀ (or dC · B when b was used transposed)
                    acc(a, &mut |buf| kernels::gemm(m, n, k, g, false, tb.data(), !bt, 1.0, buf));
                }
                if wants(b) {
                    if bt {
                        // d(B)[n x k] = dCᵀ · A
                        acc(b, &mut |buf| kernels::gemm(n, m, k, g, true, ta.data(), false, 1.0, buf));
                    } else {
                        // dB[k x n] = Aᵀ · dC
                        acc(b, &mut |buf| kernels::gemm(k, m, n, ta.data(), true, g, false, 1.0, buf));
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            &Op::AddRow { a, bias } => {
                acc(a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = nodes[bias.0].value.numel();
                acc(bias, &mut |buf| {
                    let mut sums = vec![0.0f64; n];
                    for row in g.chunks(n.max(1)) {
                        sums.iter_mut().zip(row).for_each(|(s, &y)| *s += y as f64);
                    }
                    buf.iter_mut().zip(sums).for_each(|(x, s)| *x += s as f32);
                });
            }
            &Op::Mul { a, b } => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &mut |buf| buf.iter_mut().zip(g).zip(db).for_each(|((x, y), z)| *x += y * z));
                acc(b, &mut |buf| buf.iter_mut().zip(g).zip(da).for_each(|((x, y), z)| *x += y * z));
            }
            &Op::Scale { a, s } => {
                acc(a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y * s));
            }
            &Op::Sum { a } => {
                acc(a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0]));
            }
            &Op::Gelu { a } => {
                let xa = nodes[a.0].value.data();
                acc(a, &mut |buf| {
                    for ((x, y), &z) in buf.iter_mut().zip(g).zip(xa) {
                        *x += y * kernels::gelu_grad(z);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let tx = &nodes[x.0].value;
                let n = tx.cols();
                let gd = nodes[gain.0].value.data();
                let xs = tx.data();
                let xhat = |r: usize, c: usize| ((xs[r * n + c] - mean[r]) * rstd[r]) as f64;
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        for r in 0..mean.len() {
                            let gr = &g[r * n..(r + 1) * n];
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for c in 0..n {
                                let dxh = gr[c] as f64 * gd[c] as f64;
                                m1 += dxh;
                                m2 += dxh * xhat(r, c);
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for c in 0..n {
                                let dxh = gr[c] as f64 * gd[c] as f64;
                                buf[r * n + c] += (rstd[r] as f64 * (dxh - m1 - xhat(r, c) * m2)) as f32;
                            }
                        }
                    });
                }
                acc(*gain, &mut |buf| {
                    for c in 0..n {
                        let s: f64 = (0..mean.len()).map(|r| g[r * n + c] as f64 * xhat(r, c)).sum();
                        buf[c] += s as f32;
                    }
                });
                acc(*bias, &mut |buf| {
                    for c in 0..n {
                        let s: f64 = (0..mean.len()).map(|r| g[r * n + c] as f64).sum();
                        buf[c] += s as f32;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |buf| {
                    for (row, &i) in ids.iter().enumerate() {
                        for (x, y) in buf[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    let part = &g[off..off + len];
                    acc(p, &mut |buf| buf.iter_mut().zip(part).for_each(|(x, y)| *x += y));
                    off += len;
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![0.0; tq.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let mut dv = vec![0.0; tv.numel()];
                kernels::attention_backward(
                    shape,
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    acc(var, &mut |buf| buf.iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
            }
            &Op::Softmax { a } => {
                let y = nodes[idx].value.data();
                let n = nodes[idx].value.cols();
                acc(a, &mut |buf| {
                    for ((bs, ys), gs) in buf.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for ((b, &yy), &gg) in bs.iter_mut().zip(ys).zip(gs) {
                            *b += (yy as f64 * (gg as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let rows = nodes[logits.0].value.rows() as f32;
                let s = g[0] / rows;
                acc(*logits, &mut |buf| {
                    for ((b, &p), &t) in buf.iter_mut().zip(probs).zip(target) {
                        *b += s * (p - t);
                    }
                });
            }
            Op::Nll { logits, targets, count, probs } => {
                let n = nodes[logits.0].value.cols();
                let s = g[0] / *count as f32;
                acc(*logits, &mut |buf| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut buf[r * n..(r + 1) * n];
                        for (b, &p) in row.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                            *b += s * p;
                        }
                        row[t] -= s;
                    }
                });
            }
            Op::SegmentMean { x, segments } => {
                let d = nodes[x.0].value.cols();
                acc(*x, &mut |buf| {
                    for (si, &(s, e)) in segments.iter().enumerate() {
                        let inv = 1.0 / (e - s) as f32;
                        let gs = &g[si * d..(si + 1) * d];
                        for r in s..e {
                            for (b, &y) in buf[r * d..(r + 1) * d].iter_mut().zip(gs) {
                                *b += y * inv;
                            }
                        }
                    }
                });
            }
        }
    }
}
