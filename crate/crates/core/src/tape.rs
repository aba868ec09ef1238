//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! topological order; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into a [`GradBuffer`] keyed by parameter id.
//! Sub-branches that cannot reach a trainable parameter are pruned via a
//! per-node `needs_grad` flag, so frozen weights cost no backward work.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-coordinate rotation angles for a rotary-encoding application.
/// Both coordinates of a pair carry the same cos/sin value.
#[derive(Debug)]
pub struct RopeAngles {
    pub rows: usize,
    pub cols: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Row partition for grouped attention: `index` holds `n_groups * group_size`
/// row indices, group-major. Attention mixes rows only within a group.
#[derive(Debug)]
pub struct AttentionGroups {
    pub group_size: usize,
    pub index: Vec<usize>,
}

impl AttentionGroups {
    pub fn n_groups(&self) -> usize {
        self.index.len() / self.group_size
    }

    pub fn rows(&self, g: usize) -> &[usize] {
        &self.index[g * self.group_size..(g + 1) * self.group_size]
    }
}

enum Op {
    Input,
    Param(ParamId),
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast bias add: a is R×C, bias has C elements.
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Gelu {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Rope {
        x: NodeId,
        angles: Arc<RopeAngles>,
    },
    /// Multi-head scaled-dot-product attention within row groups.
    /// `probs` stores the softmaxed weights, [group][head][query][key].
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Arc<AttentionGroups>,
        heads: usize,
        head_dim: usize,
        probs: Vec<f64>,
    },
    MeanRows {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
    /// Mean negative log-softmax of the true class; `probs` stores softmax rows.
    CrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<usize>>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter id, produced by one backward pass.
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    fn new(len: usize) -> Self {
        GradBuffer {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => add_assign(acc, g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds `scale * other` into self; used for deterministic batch reduction
    /// (callers fold buffers in a fixed order).
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (slot, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += scale * b;
                        }
                    }
                    None => {
                        let mut copy = g.clone();
                        for v in copy.data_mut() {
                            *v *= scale;
                        }
                        *slot = Some(copy);
                    }
                }
            }
        }
    }

    /// Accumulates into the store's gradient tensors. Only trainable
    /// parameters ever appear in a buffer, so frozen gradients stay zero.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                let p = store.get_mut(ParamId(i));
                debug_assert!(p.trainable);
                add_assign(&mut p.gradient, g);
            }
        }
    }

    /// Euclidean norm over all stored gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Input)
    }

    /// Parameter leaf; tracked when the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), p.trainable, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            n,
            ka,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        add_assign(&mut out, self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(a).dims2();
        if self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        {
            let bias_data: Vec<f64> = self.value(bias).data().to_vec();
            for row in out.data_mut().chunks_mut(c) {
                for (o, b) in row.iter_mut().zip(&bias_data) {
                    *o += b;
                }
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, ng, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::Scale { a, factor })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::Gelu { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(out, ng, Op::SoftmaxRows { a })
    }

    /// Per-row normalization over the last dimension followed by an affine
    /// map: `gain * (x - mean)/sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, d) = self.value(x).dims2();
        if d < 2 {
            return Err(Error::Config(format!(
                "layer_norm requires feature dimension >= 2, got {d}"
            )));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data().to_vec();
            let b = self.value(bias).data().to_vec();
            let ov = out.data_mut();
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let m = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                mean[r] = m;
                rstd[r] = s;
                for i in 0..d {
                    ov[r * d + i] = (xr[i] - m) * s * g[i] + b[i];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Rotates consecutive coordinate pairs by the precomputed angles.
    pub fn rope(&mut self, x: NodeId, angles: Arc<RopeAngles>) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2();
        if rows != angles.rows || cols != angles.cols {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: vec![rows, cols],
                rhs: vec![angles.rows, angles.cols],
            });
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        rotate_pairs(self.value(x).data(), &angles.cos, &angles.sin, out.data_mut(), false);
        let ng = self.needs(x);
        Ok(self.push(out, ng, Op::Rope { x, angles }))
    }

    /// Grouped multi-head attention. q, k, v share the shape R×(heads*head_dim);
    /// logits are scaled by 1/sqrt(head_dim).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Arc<AttentionGroups>,
        heads: usize,
    ) -> Result<NodeId> {
        let (rows, d) = self.value(q).dims2();
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: vec![rows, d],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let head_dim = d / heads;
        let gs = groups.group_size;
        let n_g = groups.n_groups();
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = vec![0.0; n_g * heads * gs * gs];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            let ov = out.data_mut();
            let mut logits = vec![0.0; gs];
            for g in 0..n_g {
                let rows_g = groups.rows(g);
                for h in 0..heads {
                    let col0 = h * head_dim;
                    let pbase = ((g * heads) + h) * gs * gs;
                    for (qi, &qr) in rows_g.iter().enumerate() {
                        let qrow = &qv[qr * d + col0..qr * d + col0 + head_dim];
                        let mut maxv = f64::NEG_INFINITY;
                        for (ki, &kr) in rows_g.iter().enumerate() {
                            let krow = &kv[kr * d + col0..kr * d + col0 + head_dim];
                            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                            let l = dot * scale;
                            logits[ki] = l;
                            if l > maxv {
                                maxv = l;
                            }
                        }
                        let mut sum = 0.0;
                        for ki in 0..gs {
                            let e = (logits[ki] - maxv).exp();
                            probs[pbase + qi * gs + ki] = e;
                            sum += e;
                        }
                        let inv = 1.0 / sum;
                        let orow = qr * d + col0;
                        for ki in 0..gs {
                            let p = probs[pbase + qi * gs + ki] * inv;
                            probs[pbase + qi * gs + ki] = p;
                            let vrow = rows_g[ki] * d + col0;
                            for c in 0..head_dim {
                                ov[orow + c] += p * vv[vrow + c];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                head_dim,
                probs,
            },
        ))
    }

    /// Softmaxed attention weights of an attention node, averaged over heads.
    /// Returns one `group_size x group_size` matrix per group.
    pub fn attention_probs_mean(&self, node: NodeId) -> Option<Vec<Tensor>> {
        if let Op::Attention {
            groups,
            heads,
            probs,
            ..
        } = &self.nodes[node.0].op
        {
            let gs = groups.group_size;
            let n_g = groups.n_groups();
            let mut maps = Vec::with_capacity(n_g);
            for g in 0..n_g {
                let mut m = Tensor::zeros(&[gs, gs]);
                for h in 0..*heads {
                    let base = ((g * heads) + h) * gs * gs;
                    for (dst, src) in m.data_mut().iter_mut().zip(&probs[base..base + gs * gs]) {
                        *dst += src / *heads as f64;
                    }
                }
                maps.push(m);
            }
            Some(maps)
        } else {
            None
        }
    }

    /// Column means: R×C -> 1×C.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.value(a).dims2();
        let mut out = Tensor::zeros(&[1, cols]);
        {
            let av = self.value(a).data();
            let ov = out.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    ov[c] += av[r * cols + c];
                }
            }
            for v in ov.iter_mut() {
                *v /= rows as f64;
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::MeanRows { a })
    }

    /// Scalar sum of all entries.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), ng, Op::SumAll { a })
    }

    /// Mean negative log-softmax of the true class over the batch rows.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Arc<Vec<usize>>) -> Result<NodeId> {
        let (rows, classes) = self.value(logits).dims2();
        if labels.len() != rows {
            return Err(Error::Data(format!(
                "{} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs_t = softmax_rows(self.value(logits));
        let probs = probs_t.into_data();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            // ln of a stabilized softmax entry; strictly positive by construction
            loss -= probs[r * classes + label].ln();
        }
        loss /= rows as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            ng,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
        ))
    }

    /// Accumulates d(loss)/d(p) for every trainable parameter reachable from
    /// `loss`. The loss must be scalar.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<GradBuffer> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut buffer = GradBuffer::new(n_params);
        if !self.nodes[loss.0].needs_grad {
            return Ok(buffer); // loss unreachable from any trainable parameter
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => buffer.accumulate(*pid, &g),
                Op::Matmul { a, b } => {
                    let (m, n) = node.value.dims2();
                    let k = self.value(*a).dims2().1;
                    if self.needs(*a) {
                        let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(&[m, k]));
                        gemm(m, k, n, 1.0, g.data(), false, self.value(*b).data(), true, 1.0, da.data_mut());
                    }
                    if self.needs(*b) {
                        let db = grads[b.0].get_or_insert_with(|| Tensor::zeros(&[k, n]));
                        gemm(k, n, m, 1.0, self.value(*a).data(), true, g.data(), false, 1.0, db.data_mut());
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) && self.needs(b) {
                        give_or_add(&mut grads, a, g.clone());
                        give_or_add(&mut grads, b, g);
                    } else if self.needs(a) {
                        give_or_add(&mut grads, a, g);
                    } else if self.needs(b) {
                        give_or_add(&mut grads, b, g);
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.needs(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let c = self.value(*bias).numel();
                        let db = grads[bias.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        for row in g.data().chunks(c) {
                            for (acc, gv) in db.data_mut().iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                    }
                    if self.needs(*a) {
                        let a = *a;
                        give_or_add(&mut grads, a, g);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.needs(*a) {
                        let mut dg = g;
                        for v in dg.data_mut() {
                            *v *= factor;
                        }
                        give_or_add(&mut grads, *a, dg);
                    }
                }
                Op::Gelu { a } => {
                    if self.needs(*a) {
                        let mut dg = g;
                        for (d, x) in dg.data_mut().iter_mut().zip(self.value(*a).data()) {
                            *d *= gelu_grad_scalar(*x);
                        }
                        give_or_add(&mut grads, *a, dg);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.needs(*a) {
                        let (rows, cols) = node.value.dims2();
                        let p = node.value.data();
                        let mut dg = Tensor::zeros(&[rows, cols]);
                        for r in 0..rows {
                            let pr = &p[r * cols..(r + 1) * cols];
                            let gr = &g.data()[r * cols..(r + 1) * cols];
                            let dot: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                            for c in 0..cols {
                                dg.data_mut()[r * cols + c] = pr[c] * (gr[c] - dot);
                            }
                        }
                        give_or_add(&mut grads, *a, dg);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let (rows, d) = self.value(*x).dims2();
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(&[rows, d]);
                        for r in 0..rows {
                            let xr = &xv[r * d..(r + 1) * d];
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let (m, s) = (mean[r], rstd[r]);
                            let mut dnorm_mean = 0.0;
                            let mut dnorm_norm_mean = 0.0;
                            for i in 0..d {
                                let xhat = (xr[i] - m) * s;
                                let dnorm = gr[i] * gv[i];
                                dnorm_mean += dnorm;
                                dnorm_norm_mean += dnorm * xhat;
                            }
                            dnorm_mean /= d as f64;
                            dnorm_norm_mean /= d as f64;
                            for i in 0..d {
                                let xhat = (xr[i] - m) * s;
                                let dnorm = gr[i] * gv[i];
                                dx.data_mut()[r * d + i] = (dnorm - dnorm_mean - xhat * dnorm_norm_mean) * s;
                            }
                        }
                        give_or_add(&mut grads, *x, dx);
                    }
                    if self.needs(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        let dgn = grads[gain.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        for r in 0..rows {
                            let (m, s) = (mean[r], rstd[r]);
                            for i in 0..d {
                                let xhat = (xv[r * d + i] - m) * s;
                                dgn.data_mut()[i] += g.data()[r * d + i] * xhat;
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let dbs = grads[bias.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        for r in 0..rows {
                            for i in 0..d {
                                dbs.data_mut()[i] += g.data()[r * d + i];
                            }
                        }
                    }
                }
                Op::Rope { x, angles } => {
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        rotate_pairs(g.data(), &angles.cos, &angles.sin, dx.data_mut(), true);
                        give_or_add(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    head_dim,
                    probs,
                } => {
                    self.attention_backward(
                        &g, *q, *k, *v, groups, *heads, *head_dim, probs, &mut grads,
                    );
                }
                Op::MeanRows { a } => {
                    if self.needs(*a) {
                        let (rows, cols) = self.value(*a).dims2();
                        let mut dx = Tensor::zeros(&[rows, cols]);
                        let inv = 1.0 / rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                dx.data_mut()[r * cols + c] = g.data()[c] * inv;
                            }
                        }
                        give_or_add(&mut grads, *a, dx);
                    }
                }
                Op::SumAll { a } => {
                    if self.needs(*a) {
                        let dx = Tensor::full(self.value(*a).shape(), g.data()[0]);
                        give_or_add(&mut grads, *a, dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if self.needs(*logits) {
                        let (rows, classes) = self.value(*logits).dims2();
                        let gscale = g.data()[0] / rows as f64;
                        let mut dx = Tensor::zeros(&[rows, classes]);
                        for r in 0..rows {
                            for c in 0..classes {
                                let indicator = if labels[r] == c { 1.0 } else { 0.0 };
                                dx.data_mut()[r * classes + c] =
                                    (probs[r * classes + c] - indicator) * gscale;
                            }
                        }
                        give_or_add(&mut grads, *logits, dx);
                    }
                }
            }
        }
        Ok(buffer)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: &AttentionGroups,
        heads: usize,
        head_dim: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let d = heads * head_dim;
        let gs = groups.group_size;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let shape = self.value(q).shape().to_vec();
        let need_q = self.needs(q);
        let need_k = self.needs(k);
        let need_v = self.needs(v);
        if !(need_q || need_k || need_v) {
            return;
        }
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let gd = g.data();

        let mut dq = if need_q { Some(Tensor::zeros(&shape)) } else { None };
        let mut dk = if need_k { Some(Tensor::zeros(&shape)) } else { None };
        let mut dv = if need_v { Some(Tensor::zeros(&shape)) } else { None };

        let mut d_attn = vec![0.0; gs];
        for grp in 0..groups.n_groups() {
            let rows_g = groups.rows(grp);
            for h in 0..heads {
                let col0 = h * head_dim;
                let pbase = ((grp * heads) + h) * gs * gs;
                for (qi, &qr) in rows_g.iter().enumerate() {
                    let dctx = &gd[qr * d + col0..qr * d + col0 + head_dim];
                    let prow = &probs[pbase + qi * gs..pbase + (qi + 1) * gs];

                    if let Some(dv) = dv.as_mut() {
                        for (ki, &kr) in rows_g.iter().enumerate() {
                            let dst = &mut dv.data_mut()[kr * d + col0..kr * d + col0 + head_dim];
                            let p = prow[ki];
                            for (acc, dc) in dst.iter_mut().zip(dctx) {
                                *acc += p * dc;
                            }
                        }
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    // d(attn weights), then softmax backward to d(logits)
                    let mut dot = 0.0;
                    for (ki, &kr) in rows_g.iter().enumerate() {
                        let vrow = &vv[kr * d + col0..kr * d + col0 + head_dim];
                        let da: f64 = dctx.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        d_attn[ki] = da;
                        dot += da * prow[ki];
                    }
                    for ki in 0..gs {
                        d_attn[ki] = prow[ki] * (d_attn[ki] - dot) * scale;
                    }
                    if let Some(dq) = dq.as_mut() {
                        let dst = &mut dq.data_mut()[qr * d + col0..qr * d + col0 + head_dim];
                        for (ki, &kr) in rows_g.iter().enumerate() {
                            let krow = &kv[kr * d + col0..kr * d + col0 + head_dim];
                            let dl = d_attn[ki];
                            for (acc, kx) in dst.iter_mut().zip(krow) {
                                *acc += dl * kx;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qrow = &qv[qr * d + col0..qr * d + col0 + head_dim];
                        for (ki, &kr) in rows_g.iter().enumerate() {
                            let dst = &mut dk.data_mut()[kr * d + col0..kr * d + col0 + head_dim];
                            let dl = d_attn[ki];
                            for (acc, qx) in dst.iter_mut().zip(qrow) {
                                *acc += dl * qx;
                            }
                        }
                    }
                }
            }
        }
        for (input, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(delta) = delta {
                give_or_add(grads, input, delta);
            }
        }
    }
}

fn give_or_add(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => add_assign(acc, &delta),
        slot => *slot = Some(delta),
    }
}

fn add_assign(acc: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

/// C[m×n] = alpha * opA·opB + beta * C, row-major buffers.
/// `ta`/`tb` mark an operand whose buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn rotate_pairs(x: &[f64], cos: &[f64], sin: &[f64], out: &mut [f64], inverse: bool) {
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in (0..x.len()).step_by(2) {
        let (c, s) = (cos[i], sign * sin[i]);
        out[i] = x[i] * c - x[i + 1] * s;
        out[i + 1] = x[i] * s + x[i + 1] * c;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654;
    let cube = 0.044715 * x * x * x;
    let t = (S * (x + cube)).tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * S * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stabilized row softmax; total on any finite input.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let maxv = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let or = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, v) in or.iter_mut().zip(xr) {
            *o = (v - maxv).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let node = tape.input(logits.clone());
    let loss = tape.cross_entropy(node, Arc::new(labels.to_vec()))?;
    Ok(tape.value(loss).data()[0])
}
