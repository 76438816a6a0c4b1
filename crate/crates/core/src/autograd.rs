//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] appends a node holding its output and the
//! data its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse and hands each input of each operation exactly one gradient
//! contribution. Nodes that do not depend on a trainable leaf are skipped,
//! so frozen weights cost nothing on the way back.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::{self, gemm, gemm_strided, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One block of an attention call: query rows `q_start..q_start+q_len`
/// attend to key rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    /// Query `i` of a segment sees key `j` only when `j <= i + k_len - q_len`.
    pub causal: bool,
}

impl AttnLayout {
    pub fn single(q_len: usize, k_len: usize, causal: bool) -> Self {
        Self {
            segments: vec![AttnSegment {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
            }],
            causal,
        }
    }

    /// Self-attention over consecutive blocks of the given lengths.
    pub fn blocks(lengths: &[usize], causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self { segments, causal }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: AttnLayout, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SelectRows { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`] or
    /// [`Tape::param`]. `None` when the leaf does not require gradients or
    /// is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Moves gradients onto the trainable parameters of `module`.
    pub fn apply_to(&mut self, module: &mut dyn crate::param::Module) -> Result<()> {
        let mut result = Ok(());
        module.visit_mut(&mut |p| {
            if let Some(g) = self.params.remove(&p.id()) {
                if result.is_ok() {
                    result = p.set_grad(g);
                }
            }
        });
        result
    }
}

fn add_into(dst: &mut Option<Tensor>, src: Tensor) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        self.nodes.push(Node {
            value: p.value_arc(),
            op: Op::Leaf,
            requires_grad: p.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id(), v);
        self.param_of.insert(v.0, p.id());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x W + b` for `x: n x i`, `W: i x o`, `b: o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (i, o) = wv.require_matrix("linear")?;
        if xv.rank() != 2 || xv.cols() != i {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let n = xv.rows();
        let mut out = Tensor::zeros(&[n, o]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(Error::shape("linear bias", wv.shape(), bv.shape()));
            }
            for row in out.data_mut().chunks_mut(o.max(1)) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), false, out.data_mut(), beta);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean of several scalars.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("mean of nothing"))?;
        let mut acc = first;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            tensor::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Scaled dot-product attention with `heads` heads over the column
    /// blocks of `q`, `k`, `v`. Query rows not covered by any segment
    /// produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: &AttnLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.require_matrix("attention")?;
        let (nk, dk) = kv.require_matrix("attention")?;
        if dk != d || vv.shape() != kv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("width {d} is not divisible by {heads} heads")));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::contract(format!("attention segment {s:?} out of bounds")));
            }
            if layout.causal && s.k_len < s.q_len {
                return Err(Error::contract("causal segment needs at least as many keys as queries"));
            }
        }
        let (out, probs) = attention_forward(qv, kv, vv, heads, layout);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, layout: layout.clone(), probs }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), pv.shape()));
            }
            rows += pv.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.require_matrix("slice_rows")?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, len]));
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { x, start }, rg))
    }

    /// Row gather, used for embedding lookups and for regrouping rows.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::contract(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::SelectRows { x, index: index.to_vec() },
            rg,
        ))
    }

    /// Mean token NLL over unmasked rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (_, v) = tensor::check_targets(lv, targets, mask)?;
        let mut probs = lv.data().to_vec();
        tensor::softmax_rows_in_place(&mut probs, v);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                total -= tensor::log_softmax_at(lv.row(r), t);
                count += 1;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                match self.param_of.get(&idx) {
                    Some(&pid) => {
                        out.params.insert(pid, g);
                    }
                    None => {
                        out.leaves.insert(idx, g);
                    }
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
        }
        for (&idx, &pid) in &self.param_of {
            if let Some(g) = out.params.get(&pid) {
                out.leaves.insert(idx, g.clone());
            }
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), 0.0);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), 0.0);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (i, o) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[n, i]);
                    gemm(n, o, i, g.data(), false, wv.data(), true, dx.data_mut(), 0.0);
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&[i, o]);
                    gemm(i, n, o, xv.data(), true, g.data(), false, dw.data_mut(), 0.0);
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.data().chunks(o.max(1)) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        add_into(&mut grads[b.0], Tensor::new(self.shape(*b).to_vec(), db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| x * s).collect();
                add_into(&mut grads[a.0], Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::Sum(a) => {
                add_into(&mut grads[a.0], Tensor::full(self.shape(*a), g.item()));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape: Vec<usize> = if y.rank() == 0 { vec![1] } else { y.shape().to_vec() };
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0; y.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let d = gv.numel();
                let rows = rstd.len();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gy = g.data()[r * d + j];
                            dg[j] += gy * xhat[r * d + j];
                            db[j] += gy;
                        }
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], Tensor::new(gv.shape().to_vec(), dg)?);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], Tensor::new(self.shape(*beta).to_vec(), db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            dx[r * d + j] = rstd[r]
                                * (dh - inv_d * sum_dh - xhat[r * d + j] * inv_d * sum_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gy)| gy * tensor::gelu_grad_scalar(v))
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    layout,
                    probs,
                    g,
                );
                if self.rg(*q) {
                    add_into(&mut grads[q.0], dq);
                }
                if self.rg(*k) {
                    add_into(&mut grads[k.0], dk);
                }
                if self.rg(*v) {
                    add_into(&mut grads[v.0], dv);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        let d = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        add_into(&mut grads[p.0], Tensor::new(vec![rows, cols], d)?);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                add_into(&mut grads[x.0], dx);
            }
            Op::SelectRows { x, index } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let dd = dx.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..cols {
                        dd[i * cols + j] += g.data()[r * cols + j];
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item() / count;
                let mut dl = vec![0.0; lv.numel()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] -= scale;
                }
                add_into(&mut grads[logits.0], Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
) -> (Tensor, Vec<f64>) {
    let nq = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
    let mut probs = vec![0.0; total];
    let mut out = Tensor::zeros(&[nq, d]);
    let di = d as isize;
    let mut offset = 0;
    for s in &layout.segments {
        let (qn, kn) = (s.q_len, s.k_len);
        if qn == 0 || kn == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &mut probs[offset..offset + qn * kn];
            let qo = s.q_start * d + h * dh;
            let ko = s.k_start * d + h * dh;
            gemm_strided(
                qn,
                dh,
                kn,
                scale,
                (&q.data()[qo..], di, 1),
                (&k.data()[ko..], 1, di),
                0.0,
                (&mut *p, kn as isize, 1),
            );
            if layout.causal {
                let shift = kn - qn;
                for i in 0..qn {
                    for j in (i + shift + 1)..kn {
                        p[i * kn + j] = f64::NEG_INFINITY;
                    }
                }
            }
            tensor::softmax_rows_in_place(p, kn);
            gemm_strided(
                qn,
                kn,
                dh,
                1.0,
                (p, kn as isize, 1),
                (&v.data()[ko..], di, 1),
                0.0,
                (&mut out.data_mut()[qo..], di, 1),
            );
            offset += qn * kn;
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let di = d as isize;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut offset = 0;
    let mut ds = Vec::new();
    for s in &layout.segments {
        let (qn, kn) = (s.q_len, s.k_len);
        if qn == 0 || kn == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &probs[offset..offset + qn * kn];
            let qo = s.q_start * d + h * dh;
            let ko = s.k_start * d + h * dh;
            // dV += P^T dO
            gemm_strided(
                kn,
                qn,
                dh,
                1.0,
                (p, 1, kn as isize),
                (&g.data()[qo..], di, 1),
                1.0,
                (&mut dv.data_mut()[ko..], di, 1),
            );
            // dP = dO V^T
            ds.clear();
            ds.resize(qn * kn, 0.0);
            gemm_strided(
                qn,
                dh,
                kn,
                1.0,
                (&g.data()[qo..], di, 1),
                (&v.data()[ko..], 1, di),
                0.0,
                (&mut ds[..], kn as isize, 1),
            );
            for i in 0..qn {
                let row = &mut ds[i * kn..(i + 1) * kn];
                let prow = &p[i * kn..(i + 1) * kn];
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, &pp) in row.iter_mut().zip(prow) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            gemm_strided(
                qn,
                kn,
                dh,
                1.0,
                (&ds[..], kn as isize, 1),
                (&k.data()[ko..], di, 1),
                1.0,
                (&mut dq.data_mut()[qo..], di, 1),
            );
            gemm_strided(
                kn,
                qn,
                dh,
                1.0,
                (&ds[..], 1, kn as isize),
                (&q.data()[qo..], di, 1),
                1.0,
                (&mut dk.data_mut()[ko..], di, 1),
            );
            offset += qn * kn;
        }
    }
    (dq, dk, dv)
}
