//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value; [`Tape::backward`] then walks the nodes in
//! reverse creation order, which visits every node after all of its
//! consumers. Parameters are borrowed from a [`ParamStore`] rather than
//! copied onto the tape.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor, Trans};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    ColMask {
        x: NodeId,
        mask: Arc<Vec<f32>>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Mean(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GatherCols {
        x: NodeId,
        idx: Vec<usize>,
    },
    Softmax {
        x: NodeId,
        temperature: f32,
    },
    LogSoftmax {
        x: NodeId,
        temperature: f32,
    },
    Nll {
        logp: NodeId,
        targets: Vec<usize>,
    },
    SoftXent {
        logp: NodeId,
        target: Tensor,
        scale: f32,
    },
    BceLogits {
        logits: NodeId,
        target: NodeId,
        /// `sigmoid(logits)`, kept from the forward pass.
        probs: Tensor,
    },
    KlStdNormal {
        mu: NodeId,
        logvar: NodeId,
    },
    Reparam {
        mu: NodeId,
        logvar: NodeId,
        noise: Tensor,
    },
    QuadPenalty {
        x: NodeId,
        anchor: Arc<Tensor>,
        weight: Arc<Tensor>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the operations of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softmax_row(src: &[f32], dst: &mut [f32], inv_t: f32) {
    let max = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0f64;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = ((s - max) * inv_t).exp();
        *d = e;
        z += e as f64;
    }
    let inv_z = (1.0 / z) as f32;
    for d in dst.iter_mut() {
        *d *= inv_z;
    }
}

fn log_softmax_row(src: &[f32], dst: &mut [f32], inv_t: f32) {
    let max = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = src
        .iter()
        .map(|&s| (((s - max) * inv_t) as f64).exp())
        .sum();
    let lz = z.ln() as f32;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max) * inv_t - lz;
    }
}

fn sigmoid(v: f32) -> f32 {
    let e = (-v.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if v >= 0.0 {
        r
    } else {
        e * r
    }
}

/// Probabilities over the `active` columns of each row of `logits`, as a
/// `[rows, active.len()]` matrix. Inactive columns are ignored entirely.
pub fn masked_softmax(logits: &Tensor, active: &[usize]) -> Result<Tensor> {
    let (m, n) = require_matrix("masked_softmax", logits)?;
    check_active(active, n)?;
    let k = active.len();
    let mut out = Tensor::zeros(&[m, k]);
    let mut buf = vec![0.0; k];
    for i in 0..m {
        let row = logits.row(i);
        for (b, &c) in buf.iter_mut().zip(active) {
            *b = row[c];
        }
        softmax_row(&buf, out.row_mut(i), 1.0);
    }
    Ok(out)
}

fn check_active(active: &[usize], width: usize) -> Result<()> {
    if active.is_empty() {
        return Err(TensorError::Contract("empty active set".into()));
    }
    if let Some(&bad) = active.iter().find(|&&c| c >= width) {
        return Err(TensorError::Contract(format!(
            "active index {bad} outside output width {width}"
        )));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.get(*p),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a constant input; it never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Records (once) a leaf for a trainable parameter.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(Trans::No, Trans::No, m, k, n, av.data(), bv.data(), out.data_mut(), 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn bias_into(out: &mut Tensor, bias: &Tensor) {
        let n = bias.len();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
    }

    /// Fused `x · w + b` with `w` of shape `[in, out]` and `b` of `[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(shape_err("linear", xv, wv));
        }
        if bv.len() != wv.shape()[1] {
            return Err(shape_err("linear bias", wv, bv));
        }
        let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(Trans::No, Trans::No, m, k, n, xv.data(), wv.data(), out.data_mut(), 0.0);
        Self::bias_into(&mut out, bv);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        Self::bias_into(&mut out, bv);
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias { x, b }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Multiplies every row of `x` elementwise by the constant `mask`.
    pub fn col_mask(&mut self, x: NodeId, mask: Arc<Vec<f32>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (_, n) = require_matrix("col_mask", xv)?;
        if mask.len() != n {
            return Err(TensorError::Shape {
                op: "col_mask",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &m) in row.iter_mut().zip(mask.iter()) {
                *o *= m;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ColMask { x, mask }, ng))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_f64() as f32;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = (v.sum_f64() / v.len().max(1) as f64) as f32;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = require_matrix("slice_cols", xv)?;
        if start > end || end > n {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{end} outside width {n}"
            )));
        }
        let k = end - start;
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::matrix(m, k, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = require_matrix("slice_rows", xv)?;
        if start > end || end > m {
            return Err(TensorError::Contract(format!(
                "row slice {start}..{end} outside height {m}"
            )));
        }
        let out = Tensor::matrix(end - start, n, xv.data()[start * n..end * n].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// Selects the same column set from every row.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let m = self.value(x).rows();
        let idx: Vec<usize> = (0..m).flat_map(|_| cols.iter().copied()).collect();
        self.gather_cols_per_row(x, idx, cols.len())
    }

    /// Selects `k` columns from each row; `idx` is a row-major `[rows, k]`
    /// table of column indices, so different rows may use different heads.
    pub fn gather_cols_per_row(&mut self, x: NodeId, idx: Vec<usize>, k: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = require_matrix("gather_cols", xv)?;
        if k == 0 {
            return Err(TensorError::Contract("empty active set".into()));
        }
        if idx.len() != m * k {
            return Err(TensorError::Contract(format!(
                "gather table has {} entries, expected {}x{}",
                idx.len(),
                m,
                k
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
            return Err(TensorError::Contract(format!(
                "active index {bad} outside output width {n}"
            )));
        }
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            let row = xv.row(i);
            data.extend(idx[i * k..(i + 1) * k].iter().map(|&c| row[c]));
        }
        let out = Tensor::matrix(m, k, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherCols { x, idx }, ng))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: NodeId, temperature: f32) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, _) = require_matrix("softmax", xv)?;
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..m {
            softmax_row(xv.row(i), out.row_mut(i), 1.0 / temperature);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, temperature }, ng))
    }

    /// Row-wise log-softmax of `x / temperature`, max-subtracted.
    pub fn log_softmax(&mut self, x: NodeId, temperature: f32) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, _) = require_matrix("log_softmax", xv)?;
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..m {
            log_softmax_row(xv.row(i), out.row_mut(i), 1.0 / temperature);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSoftmax { x, temperature }, ng))
    }

    /// Softmax restricted to the `active` columns.
    pub fn masked_softmax(&mut self, logits: NodeId, active: &[usize], temperature: f32) -> Result<NodeId> {
        check_active(active, self.value(logits).cols())?;
        let g = self.gather_cols(logits, active)?;
        self.softmax(g, temperature)
    }

    /// Log-softmax restricted to the `active` columns.
    pub fn masked_log_softmax(
        &mut self,
        logits: NodeId,
        active: &[usize],
        temperature: f32,
    ) -> Result<NodeId> {
        check_active(active, self.value(logits).cols())?;
        let g = self.gather_cols(logits, active)?;
        self.log_softmax(g, temperature)
    }

    /// Mean over rows of `-logp[i, targets[i]]`.
    pub fn nll(&mut self, logp: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logp);
        let (m, k) = require_matrix("nll", lv)?;
        if targets.len() != m {
            return Err(TensorError::Contract(format!(
                "{} targets for {} rows",
                targets.len(),
                m
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Contract(format!(
                "target {bad} outside active set of size {k}"
            )));
        }
        let s: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(lv.row(i)[t] as f64))
            .sum();
        let out = Tensor::scalar((s / m as f64) as f32);
        let ng = self.ng(logp);
        Ok(self.push(
            out,
            Op::Nll {
                logp,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// `scale` times the mean over rows of `-Σ_c target[i,c] · logp[i,c]`.
    pub fn soft_cross_entropy(&mut self, logp: NodeId, target: Tensor, scale: f32) -> Result<NodeId> {
        let lv = self.value(logp);
        if lv.shape() != target.shape() || lv.shape().len() != 2 {
            return Err(shape_err("soft_cross_entropy", lv, &target));
        }
        let m = lv.rows();
        let s: f64 = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| -(t as f64) * l as f64)
            .sum();
        let out = Tensor::scalar((scale as f64 * s / m as f64) as f32);
        let ng = self.ng(logp);
        Ok(self.push(out, Op::SoftXent { logp, target, scale }, ng))
    }

    /// Binary cross-entropy between targets in `[0,1]` and `sigmoid(logits)`,
    /// summed over columns and averaged over rows. Evaluated in the
    /// overflow-free form `max(l,0) - l·x + ln(1 + e^{-|l|})`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (lv, tv) = (self.value(logits), self.value(target));
        if lv.shape() != tv.shape() || lv.shape().len() != 2 {
            return Err(shape_err("bce_with_logits", lv, tv));
        }
        let m = lv.rows();
        let mut probs = Tensor::zeros(lv.shape());
        let mut s = 0.0f64;
        // ln(1 + e^{-|l|}) is summed as the log of a product; each factor
        // is at most 2, so chunks of 512 stay far from overflow.
        for ((p, l), x) in probs
            .data_mut()
            .chunks_mut(512)
            .zip(lv.data().chunks(512))
            .zip(tv.data().chunks(512))
        {
            let mut prod = 1.0f64;
            for ((p, &l), &x) in p.iter_mut().zip(l).zip(x) {
                let e = (-l.abs()).exp();
                let r = 1.0 / (1.0 + e);
                *p = if l >= 0.0 { r } else { e * r };
                prod *= 1.0 + e as f64;
                s += (l.max(0.0) - l * x) as f64;
            }
            s += prod.ln();
        }
        let out = Tensor::scalar((s / m as f64) as f32);
        let ng = self.ng(logits);
        Ok(self.push(out, Op::BceLogits { logits, target, probs }, ng))
    }

    /// Mean over rows of `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() || mv.shape().len() != 2 {
            return Err(shape_err("kl_std_normal", mv, lv));
        }
        let m = mv.rows();
        let s: f64 = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&u, &l)| 0.5 * (u as f64 * u as f64 + (l as f64).exp() - 1.0 - l as f64))
            .sum();
        let out = Tensor::scalar((s / m as f64) as f32);
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(out, Op::KlStdNormal { mu, logvar }, ng))
    }

    /// `mu + exp(logvar / 2) · noise`; the noise is recorded so backward is
    /// deterministic.
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, noise: Tensor) -> Result<NodeId> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() {
            return Err(shape_err("reparameterize", mv, lv));
        }
        if noise.shape() != mv.shape() {
            return Err(shape_err("reparameterize noise", mv, &noise));
        }
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(noise.data())
            .map(|((&u, &l), &e)| u + (0.5 * l).exp() * e)
            .collect();
        let out = Tensor::new(mv.shape().to_vec(), data)?;
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(out, Op::Reparam { mu, logvar, noise }, ng))
    }

    /// `Σ weight · (x - anchor)²` over all entries.
    pub fn quad_penalty(
        &mut self,
        x: NodeId,
        anchor: Arc<Tensor>,
        weight: Arc<Tensor>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != anchor.shape() {
            return Err(shape_err("quad_penalty anchor", xv, &anchor));
        }
        if xv.shape() != weight.shape() {
            return Err(shape_err("quad_penalty weight", xv, &weight));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(anchor.data())
            .zip(weight.data())
            .map(|((&t, &a), &w)| {
                let d = t as f64 - a as f64;
                w as f64 * d * d
            })
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::QuadPenalty { x, anchor, weight }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the
    /// borrowed store.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss node is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, i, g, &mut grads, &mut param_grads)?;
        }
        let param_grads = param_grads
            .into_iter()
            .zip(self.params.tensors())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok(Gradients::new(param_grads))
    }

    fn backprop_node(
        &self,
        node: &Node,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let out = self.value(NodeId(i));
        match &node.op {
            Op::Input => {}
            // each parameter has a single leaf, so its gradient arrives once
            Op::Param(p) => param_grads[p.0] = Some(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let (buf, beta) = slot(grads, *a, av.shape());
                    gemm(Trans::No, Trans::Yes, m, n, k, g.data(), bv.data(), buf.data_mut(), beta);
                }
                if self.ng(*b) {
                    let (buf, beta) = slot(grads, *b, bv.shape());
                    gemm(Trans::Yes, Trans::No, k, m, n, av.data(), g.data(), buf.data_mut(), beta);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.ng(*x) {
                    let (buf, beta) = slot(grads, *x, xv.shape());
                    gemm(Trans::No, Trans::Yes, m, n, k, g.data(), wv.data(), buf.data_mut(), beta);
                }
                if self.ng(*w) {
                    let (buf, beta) = slot(grads, *w, wv.shape());
                    gemm(Trans::Yes, Trans::No, k, m, n, xv.data(), g.data(), buf.data_mut(), beta);
                }
                if self.ng(*b) {
                    let db = col_sums(&g);
                    accumulate(grads, *b, db)?;
                }
            }
            Op::AddBias { x, b } => {
                if self.ng(*b) {
                    accumulate(grads, *b, col_sums(&g))?;
                }
                if self.ng(*x) {
                    accumulate(grads, *x, g)?;
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let mut d = g;
                    for (dv, &o) in d.data_mut().iter_mut().zip(out.data()) {
                        *dv = if o > 0.0 { *dv } else { 0.0 };
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(out.data()) {
                        *dv *= y * (1.0 - y);
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::ColMask { x, mask } => {
                if self.ng(*x) {
                    let mut d = g;
                    let n = mask.len();
                    for row in d.data_mut().chunks_exact_mut(n) {
                        for (dv, &mk) in row.iter_mut().zip(mask.iter()) {
                            *dv *= mk;
                        }
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = zip_map(&g, bv, |gv, y| gv * y);
                    accumulate(grads, *a, d)?;
                }
                if self.ng(*b) {
                    let d = zip_map(&g, av, |gv, x| gv * x);
                    accumulate(grads, *b, d)?;
                }
            }
            Op::Scale(a, f) => {
                if self.ng(*a) {
                    let f = *f;
                    accumulate(grads, *a, g.map(|v| v * f))?;
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(grads, *a, Tensor::full(&shape, g.item()))?;
                }
            }
            Op::Mean(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let v = g.item() / av.len().max(1) as f32;
                    accumulate(grads, *a, Tensor::full(av.shape(), v))?;
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let k = out.cols();
                    let (buf, _) = slot(grads, *x, xv.shape());
                    for r in 0..xv.rows() {
                        let dst = &mut buf.row_mut(r)[*start..*start + k];
                        for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let (buf, _) = slot(grads, *x, xv.shape());
                    let dst = &mut buf.data_mut()[start * n..start * n + g.len()];
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let k = out.cols();
                    let (buf, _) = slot(grads, *x, xv.shape());
                    for r in 0..xv.rows() {
                        let src = g.row(r);
                        let dst = buf.row_mut(r);
                        for (j, &c) in idx[r * k..(r + 1) * k].iter().enumerate() {
                            dst[c] += src[j];
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                if self.ng(*x) {
                    let inv_t = 1.0 / *temperature;
                    let mut d = Tensor::zeros(out.shape());
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: f32 = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *dv = yv * (gv - dot) * inv_t;
                        }
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::LogSoftmax { x, temperature } => {
                if self.ng(*x) {
                    let inv_t = 1.0 / *temperature;
                    let mut d = Tensor::zeros(out.shape());
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let gsum: f32 = gy.iter().sum();
                        for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *dv = (gv - yv.exp() * gsum) * inv_t;
                        }
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::Nll { logp, targets } => {
                if self.ng(*logp) {
                    let lv = self.value(*logp);
                    let m = lv.rows();
                    let v = -g.item() / m as f32;
                    let (buf, _) = slot(grads, *logp, lv.shape());
                    for (r, &t) in targets.iter().enumerate() {
                        buf.row_mut(r)[t] += v;
                    }
                }
            }
            Op::SoftXent { logp, target, scale } => {
                if self.ng(*logp) {
                    let m = target.rows();
                    let f = -g.item() * scale / m as f32;
                    accumulate(grads, *logp, target.map(|t| t * f))?;
                }
            }
            Op::BceLogits { logits, target, probs } => {
                if self.ng(*logits) {
                    let tv = self.value(*target);
                    let f = g.item() / probs.rows() as f32;
                    let d = zip_map(probs, tv, |p, x| (p - x) * f);
                    accumulate(grads, *logits, d)?;
                }
            }
            Op::KlStdNormal { mu, logvar } => {
                let (mv, lv) = (self.value(*mu), self.value(*logvar));
                let f = g.item() / mv.rows() as f32;
                if self.ng(*mu) {
                    accumulate(grads, *mu, mv.map(|u| u * f))?;
                }
                if self.ng(*logvar) {
                    accumulate(grads, *logvar, lv.map(|l| 0.5 * (l.exp() - 1.0) * f))?;
                }
            }
            Op::Reparam { mu, logvar, noise } => {
                if self.ng(*mu) {
                    accumulate(grads, *mu, g.clone())?;
                }
                if self.ng(*logvar) {
                    let lv = self.value(*logvar);
                    let data = g
                        .data()
                        .iter()
                        .zip(lv.data())
                        .zip(noise.data())
                        .map(|((&gv, &l), &e)| gv * e * 0.5 * (0.5 * l).exp())
                        .collect();
                    accumulate(grads, *logvar, Tensor::new(lv.shape().to_vec(), data)?)?;
                }
            }
            Op::QuadPenalty { x, anchor, weight } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let f = 2.0 * g.item();
                    let data = xv
                        .data()
                        .iter()
                        .zip(anchor.data())
                        .zip(weight.data())
                        .map(|((&t, &a), &w)| f * w * (t - a))
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `id`, plus the GEMM `beta` that accumulates into it.
fn slot<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> (&'g mut Tensor, f32) {
    let beta = if grads[id.0].is_some() { 1.0 } else { 0.0 };
    let buf = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
    (buf, beta)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        empty => {
            *empty = Some(g);
            Ok(())
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut acc = vec![0.0f64; n];
    for row in g.data().chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::vector(acc.into_iter().map(|v| v as f32).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map of equal shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (store, ids) = store_with(&[("theta", Tensor::vector(vec![1.0, -2.0]))]);
        let mut tape = Tape::new(&store);
        let t = tape.param(ids[0]);
        let sq = tape.mul(t, t).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[0]).data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let (store, ids) = store_with(&[
            ("used", Tensor::vector(vec![3.0])),
            ("unused", Tensor::vector(vec![5.0, 6.0])),
        ]);
        let mut tape = Tape::new(&store);
        let u = tape.param(ids[0]);
        let loss = tape.sum(u);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[1]).data(), &[0.0, 0.0]);
        assert_eq!(g.get(ids[0]).data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let r = tape.relu(p);
        assert!(matches!(tape.backward(r), Err(TensorError::Contract(_))));
    }

    #[test]
    fn masked_softmax_hand_values() {
        let logits = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = masked_softmax(&logits, &[1, 3]).unwrap();
        assert!((p.data()[0] - 0.119_202_92).abs() < 1e-6);
        assert!((p.data()[1] - 0.880_797_1).abs() < 1e-6);

        let flat = Tensor::matrix(1, 10, vec![0.3; 10]).unwrap();
        let q = masked_softmax(&flat, &[4, 7]).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);
        assert!(masked_softmax(&flat, &[]).is_err());
        assert!(masked_softmax(&flat, &[10]).is_err());
    }

    #[test]
    fn full_active_set_is_plain_softmax() {
        let logits = Tensor::matrix(2, 3, vec![0.1, -1.0, 2.0, 3.0, 3.0, -4.0]).unwrap();
        let all: Vec<usize> = (0..3).collect();
        let p = masked_softmax(&logits, &all).unwrap();
        for r in 0..2 {
            let row = logits.row(r);
            let z: f32 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                assert!((p.row(r)[c] - row[c].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inactive_logits_receive_no_gradient() {
        let (store, ids) = store_with(&[("z", Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap())]);
        let mut tape = Tape::new(&store);
        let z = tape.param(ids[0]);
        let lp = tape.masked_log_softmax(z, &[1, 3], 1.0).unwrap();
        let loss = tape.nll(lp, &[0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let d = g.get(ids[0]).data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[2], 0.0);
        assert!(d[1] != 0.0 && d[3] != 0.0);
    }

    #[test]
    fn reparameterize_with_zero_sigma_is_mean() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mu = tape.input(Tensor::matrix(1, 3, vec![0.25, -1.5, 3.0]).unwrap());
        let lv = tape.input(Tensor::full(&[1, 3], f32::NEG_INFINITY));
        let z = tape
            .reparameterize(mu, lv, Tensor::matrix(1, 3, vec![2.0, -0.7, 1.1]).unwrap())
            .unwrap();
        assert_eq!(tape.value(z).data(), &[0.25, -1.5, 3.0]);
    }
}
