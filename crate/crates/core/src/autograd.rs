//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node, in
//! creation order, which is also a topological order. [`Tape::backward`]
//! walks the nodes in strict reverse creation order, accumulating gradients
//! into every node that requires them. A tape is single use: build a fresh
//! one for each forward pass.
//!
//! Values live on the tape; callers hold [`Var`] handles.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, numel, Broadcast, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined unary op: `(input, output, upstream) -> input grad`.
pub type CustomBackward = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, axis: usize, rstd: Vec<f64> },
    MatMul(Var, Var),
    Transpose(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Custom { x: Var, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        let out_shape = broadcast_shape(sa, sb)?;
        let pa = Broadcast::plan(&out_shape, sa);
        let pb = Broadcast::plan(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match (&pa, &pb) {
            (Broadcast::Same, Broadcast::Same) => {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..numel(&out_shape))
                .map(|i| f(da[pa.index(i)], db[pb.index(i)]))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.node(x)?.value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Unary op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        x: Var,
        forward: impl Fn(f64) -> f64,
        backward: CustomBackward,
    ) -> Result<Var> {
        self.unary(x, forward, Op::Custom { x, backward })
    }

    // ---- normalization --------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let nd = self.node(x)?.value.ndim();
        if axis >= nd {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for tensor of rank {nd}"
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = &self.nodes[x.0].value;
        let (outer, len, inner) = softmax_layout(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for a in 0..len {
                    m = m.max(src[base + a * inner]);
                }
                let mut s = 0.0;
                for a in 0..len {
                    let e = (src[base + a * inner] - m).exp();
                    out[base + a * inner] = e;
                    s += e;
                }
                for a in 0..len {
                    out[base + a * inner] /= s;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Softmax over the last axis of a `[.., T, T]` score tensor where row
    /// `i` only sees columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let nd = t.ndim();
        if nd < 2 || t.shape()[nd - 1] != t.shape()[nd - 2] {
            return Err(Error::Shape(format!(
                "causal_softmax needs [.., T, T], got {:?}",
                t.shape()
            )));
        }
        let n = t.shape()[nd - 1];
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (row_idx, (row, dst)) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let i = row_idx % n;
            let visible = &row[..=i];
            let m = visible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (d, &v) in dst[..=i].iter_mut().zip(visible) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in &mut dst[..=i] {
                *d /= s;
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::CausalSoftmax(x)))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance
    /// (biased variance, `eps` added under the square root). No affine part.
    pub fn layernorm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = &self.nodes[x.0].value;
        let (outer, len, inner) = softmax_layout(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut rstds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|a| src[base + a * inner]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|a| {
                        let d = src[base + a * inner] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / len as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for a in 0..len {
                    out[base + a * inner] = (src[base + a * inner] - mean) * rstd;
                }
                rstds.push(rstd);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                axis,
                rstd: rstds,
            },
        ))
    }

    // ---- linear algebra and layout -------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`;
    /// batch dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        let plan = MatMulPlan::new(sa, sb)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        plan.forward(da, db, &mut out);
        let out = Tensor::new(&plan.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.node(x)?.value.ndim();
        if nd < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        let out = permute_tensor(&self.nodes[x.0].value, &perm);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.node(x)?.value.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "{perm:?} is not a permutation of {nd} axes"
            )));
        }
        let out = permute_tensor(&self.nodes[x.0].value, perm);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Row gather: `table [V, D]`, `ids` with shape `ids_shape` -> `[ids_shape.., D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = &self.node(table)?.value;
        if t.ndim() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be [V, D], got {:?}",
                t.shape()
            )));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids do not fill shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Data(format!(
                    "token id {id} at position {pos} outside vocabulary of {v}"
                )));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(x)))
    }

    /// Mean next-token cross-entropy in nats. `logits` is `[.., V]`, one
    /// target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        let v = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("cross_entropy on a scalar".into()))?;
        let rows = t.numel() / v.max(1);
        if rows != targets.len() {
            return Err(Error::Shape(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                t.shape()
            )));
        }
        let mut probs = vec![0.0; t.numel()];
        let mut total = 0.0;
        for (r, (row, p)) in t.data().chunks_exact(v).zip(probs.chunks_exact_mut(v)).enumerate() {
            let target = targets[r];
            if target >= v {
                return Err(Error::Data(format!(
                    "target {target} at row {r} outside vocabulary of {v}"
                )));
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - m).exp();
                s += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= s;
            }
            total += m + s.ln() - row[target];
        }
        let loss = total / rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// leaf created with `requires_grad`; read them with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        let shape = self.node(loss)?.value.shape();
        if numel(shape) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, sign) in [(*a, 1.0), (*b, sign_b)] {
                    if !nodes[v.0].requires_grad {
                        continue;
                    }
                    let plan = Broadcast::plan(node.value.shape(), nodes[v.0].value.shape());
                    let dst = slot(nodes, grads, v);
                    match plan {
                        Broadcast::Same => dst.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x),
                        _ => g.iter().enumerate().for_each(|(k, &x)| dst[plan.index(k)] += sign * x),
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let pa = Broadcast::plan(node.value.shape(), nodes[a.0].value.shape());
                let pb = Broadcast::plan(node.value.shape(), nodes[b.0].value.shape());
                if nodes[a.0].requires_grad {
                    let dst = slot(nodes, grads, a);
                    for (k, &x) in g.iter().enumerate() {
                        dst[pa.index(k)] += x * db[pb.index(k)];
                    }
                }
                if nodes[b.0].requires_grad {
                    let dst = slot(nodes, grads, b);
                    for (k, &x) in g.iter().enumerate() {
                        dst[pb.index(k)] += x * da[pa.index(k)];
                    }
                }
            }
            Op::Scale(x, c) => {
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().zip(g).for_each(|(d, &u)| *d += c * u);
            }
            Op::Exp(x) => {
                let dst = slot(nodes, grads, *x);
                for ((d, &u), &y) in dst.iter_mut().zip(g).zip(out) {
                    *d += u * y;
                }
            }
            Op::Log(x) => {
                let src = nodes[x.0].value.data();
                let dst = slot(nodes, grads, *x);
                for ((d, &u), &v) in dst.iter_mut().zip(g).zip(src) {
                    *d += u / v;
                }
            }
            Op::Tanh(x) => {
                let dst = slot(nodes, grads, *x);
                for ((d, &u), &y) in dst.iter_mut().zip(g).zip(out) {
                    *d += u * (1.0 - y * y);
                }
            }
            Op::Gelu(x) => {
                let src = nodes[x.0].value.data();
                let dst = slot(nodes, grads, *x);
                for ((d, &u), &v) in dst.iter_mut().zip(g).zip(src) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += u * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Custom { x, backward } => {
                let src = nodes[x.0].value.data();
                let contrib = backward(src, out, g);
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().zip(contrib).for_each(|(d, c)| *d += c);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = softmax_layout(node.value.shape(), *axis);
                let dst = slot(nodes, grads, *x);
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len).map(|a| g[base + a * inner] * out[base + a * inner]).sum();
                        for a in 0..len {
                            let j = base + a * inner;
                            dst[j] += out[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let dst = slot(nodes, grads, *x);
                for (row_idx, ((y, u), d)) in out
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dst.chunks_exact_mut(n))
                    .enumerate()
                {
                    let vis = row_idx % n + 1;
                    let dot: f64 = y[..vis].iter().zip(&u[..vis]).map(|(a, b)| a * b).sum();
                    for j in 0..vis {
                        d[j] += y[j] * (u[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, len, inner) = softmax_layout(node.value.shape(), *axis);
                let dst = slot(nodes, grads, *x);
                let nf = len as f64;
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let r = rstd[o * inner + k];
                        let mut mg = 0.0;
                        let mut mgy = 0.0;
                        for a in 0..len {
                            let j = base + a * inner;
                            mg += g[j];
                            mgy += g[j] * out[j];
                        }
                        mg /= nf;
                        mgy /= nf;
                        for a in 0..len {
                            let j = base + a * inner;
                            dst[j] += r * (g[j] - mg - out[j] * mgy);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let plan = MatMulPlan::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())?;
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if nodes[a.0].requires_grad {
                    let dst = slot(nodes, grads, a);
                    plan.grad_a(g, db, dst);
                }
                if nodes[b.0].requires_grad {
                    let dst = slot(nodes, grads, b);
                    plan.grad_b(g, da, dst);
                }
            }
            Op::Transpose(x) => {
                let nd = node.value.ndim();
                let mut perm: Vec<usize> = (0..nd).collect();
                perm.swap(nd - 2, nd - 1);
                let gt = permute_tensor(&Tensor::new(node.value.shape(), g.to_vec())?, &perm);
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().zip(gt.data()).for_each(|(d, &u)| *d += u);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = permute_tensor(&Tensor::new(node.value.shape(), g.to_vec())?, &inv);
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().zip(gt.data()).for_each(|(d, &u)| *d += u);
            }
            Op::Reshape(x) => {
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().zip(g).for_each(|(d, &u)| *d += u);
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                let dst = slot(nodes, grads, *table);
                for (&id, row) in ids.iter().zip(g.chunks_exact(d)) {
                    dst[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, &u)| *a += u);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = *nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / targets.len() as f64;
                let dst = slot(nodes, grads, *logits);
                for ((d, p), &t) in dst.chunks_exact_mut(v).zip(probs.chunks_exact(v)).zip(targets) {
                    for (di, &pi) in d.iter_mut().zip(p) {
                        *di += scale * pi;
                    }
                    d[t] -= scale;
                }
            }
            Op::Sum(x) => {
                let dst = slot(nodes, grads, *x);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let dst = slot(nodes, grads, *x);
                let s = g[0] / dst.len() as f64;
                dst.iter_mut().for_each(|d| *d += s);
            }
        }
        Ok(())
    }
}

/// Gradient accumulator of `v`, zero-initialized on first use.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // Input stride for each output axis.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 {
        out.extend_from_slice(src);
    } else {
        // Innermost output axis is copied in a tight loop.
        let last = nd - 1;
        let (n_last, s_last) = (out_shape[last], strides[last]);
        let mut counter = vec![0usize; last];
        let mut cur = 0usize;
        let rows = if n_last == 0 { 0 } else { total / n_last };
        for _ in 0..rows {
            out.extend((0..n_last).map(|j| src[cur + j * s_last]));
            for d in (0..last).rev() {
                counter[d] += 1;
                cur += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                cur -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}

/// Shape bookkeeping for a broadcast batched matmul.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(a_offset, b_offset)` matrix index for each output batch entry;
    /// `None` when `b` is a single matrix and `a` can be flattened.
    batches: Option<Vec<(usize, usize)>>,
    /// Rows of the flattened `a` in the single-matrix case.
    rows: usize,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .map_err(|_| Error::Shape(format!("matmul batch dims do not broadcast: {sa:?} x {sb:?}")))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        if numel(bb) == 1 && ba.len() >= bb.len() {
            return Ok(Self {
                m,
                k,
                n,
                out_shape,
                batches: None,
                rows: numel(ba) * m,
            });
        }
        let pa = Broadcast::plan(&batch, ba);
        let pb = Broadcast::plan(&batch, bb);
        let batches = (0..numel(&batch)).map(|i| (pa.index(i), pb.index(i))).collect();
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            batches: Some(batches),
            rows: 0,
        })
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match &self.batches {
            None => gemm(self.rows, k, n, a, k, 1, b, n, 1, c, 0.0),
            Some(batches) => {
                for (bi, &(ia, ib)) in batches.iter().enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        &a[ia * m * k..(ia + 1) * m * k],
                        k,
                        1,
                        &b[ib * k * n..(ib + 1) * k * n],
                        n,
                        1,
                        &mut c[bi * m * n..(bi + 1) * m * n],
                        0.0,
                    )
                }
            }
        }
    }

    /// `dA += dC . B^T`
    fn grad_a(&self, dc: &[f64], b: &[f64], da: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match &self.batches {
            None => gemm(self.rows, n, k, dc, n, 1, b, 1, n, da, 1.0),
            Some(batches) => {
                for (bi, &(ia, ib)) in batches.iter().enumerate() {
                    gemm(
                        m,
                        n,
                        k,
                        &dc[bi * m * n..(bi + 1) * m * n],
                        n,
                        1,
                        &b[ib * k * n..(ib + 1) * k * n],
                        1,
                        n,
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        1.0,
                    )
                }
            }
        }
    }

    /// `dB += A^T . dC`
    fn grad_b(&self, dc: &[f64], a: &[f64], db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match &self.batches {
            None => gemm(k, self.rows, n, a, 1, k, dc, n, 1, db, 1.0),
            Some(batches) => {
                for (bi, &(ia, ib)) in batches.iter().enumerate() {
                    gemm(
                        k,
                        m,
                        n,
                        &a[ia * m * k..(ia + 1) * m * k],
                        1,
                        k,
                        &dc[bi * m * n..(bi + 1) * m * n],
                        n,
                        1,
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        1.0,
                    )
                }
            }
        }
    }
}

/// `C = A B + beta C` for an `m x k` by `k x n` product with explicit
/// row/column strides; `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element address the kernel
    // touches inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
