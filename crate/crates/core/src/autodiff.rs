//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so operands always precede their consumers. [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for every leaf that
//! was created with [`Graph::param`]. Graphs are single-threaded and meant to
//! be dropped after one backward pass.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Real;
use crate::sparse::SparseTensor;
use crate::tensor::{gelu_grad_scalar, row_stats, softmax_in_place, Tensor};

/// Probabilities below this are clamped inside `log` by the entropy op.
pub const ENTROPY_LOG_FLOOR: f64 = 1e-12;

enum Op<T: Real> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    Entropy(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    PrependToken {
        tokens: usize,
        cls: usize,
        groups: usize,
    },
    Reshape(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Combine {
        base: usize,
        terms: Vec<usize>,
        coeffs: usize,
    },
    SparseCombine {
        base: usize,
        terms: Vec<Arc<SparseTensor<T>>>,
        coeffs: usize,
    },
    SparseMatMul {
        a: usize,
        s: Arc<SparseTensor<T>>,
    },
}

impl<T: Real> Op<T> {
    fn operands(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Gelu(a) | Softmax(a) | Entropy(a) | Sum(a) | Mean(a)
            | MeanRows(a) | Reshape(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CrossEntropy { logits, .. } => vec![*logits],
            SliceRows { a, .. } => vec![*a],
            ConcatRows(ids) => ids.clone(),
            PrependToken { tokens, cls, .. } => vec![*tokens, *cls],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Combine {
                base,
                terms,
                coeffs,
            } => {
                let mut ids = vec![*base, *coeffs];
                ids.extend(terms);
                ids
            }
            SparseCombine { base, coeffs, .. } => vec![*base, *coeffs],
            SparseMatMul { a, .. } => vec![*a],
        }
    }
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var<'_, T>> {
        value.check_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.operands().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: receives a gradient from [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Frozen leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_rows needs at least one part".into()))?;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", first.value().shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(ids),
            "concat_rows",
        )
    }

    /// Inserts `cls` in front of every group of `tokens.rows() / groups` rows.
    pub fn prepend_token<'g>(
        &'g self,
        tokens: Var<'g, T>,
        cls: Var<'g, T>,
        groups: usize,
    ) -> Result<Var<'g, T>> {
        let tv = tokens.value();
        let cv = cls.value();
        let d = tv.cols();
        if cv.len() != d || groups == 0 || !tv.rows().is_multiple_of(groups) {
            return Err(Error::shape("prepend_token", tv.shape(), cv.shape()));
        }
        let per = tv.rows() / groups;
        let mut data = Vec::with_capacity((tv.rows() + groups) * d);
        for g in 0..groups {
            data.extend_from_slice(cv.data());
            data.extend_from_slice(&tv.data()[g * per * d..(g + 1) * per * d]);
        }
        self.push(
            Tensor::from_parts(vec![tv.rows() + groups, d], data),
            Op::PrependToken {
                tokens: tokens.id,
                cls: cls.id,
                groups,
            },
            "prepend_token",
        )
    }

    /// Multi-head scaled dot-product attention over consecutive groups of
    /// `seq` rows. `q`, `k`, `v` are `[groups·seq × d]` with `d` divisible by
    /// `heads`; the output has the same shape.
    pub fn attention<'g>(
        &'g self,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        seq: usize,
        heads: usize,
    ) -> Result<Var<'g, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || seq == 0 || qv.rows() % seq != 0 {
            return Err(Error::contract(format!(
                "attention: d={d}, heads={heads}, seq={seq}, rows={}",
                qv.rows()
            )));
        }
        let dh = d / heads;
        let groups = qv.rows() / seq;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); qv.len()];
        let mut probs = vec![T::zero(); groups * heads * seq * seq];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * seq * seq..(g * heads + h + 1) * seq * seq];
                for s in 0..seq {
                    let qrow = &qv.data()[(g * seq + s) * d + h * dh..][..dh];
                    let prow = &mut p[s * seq..(s + 1) * seq];
                    for (t, pv) in prow.iter_mut().enumerate() {
                        let krow = &kv.data()[(g * seq + t) * d + h * dh..][..dh];
                        *pv = kernels::dot(qrow, krow) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(g * seq + s) * d + h * dh..][..dh];
                    for (t, &pv) in prow.iter().enumerate() {
                        let vrow = &vv.data()[(g * seq + t) * d + h * dh..][..dh];
                        kernels::axpy(pv, vrow, orow);
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                seq,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// `base + Σᵢ coeffs[i] · terms[i]`.
    pub fn combine<'g>(
        &'g self,
        base: Var<'g, T>,
        terms: &[Var<'g, T>],
        coeffs: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let c = coeffs.value();
        if c.len() != terms.len() {
            return Err(Error::contract(format!(
                "combine: {} coefficients for {} terms",
                c.len(),
                terms.len()
            )));
        }
        let mut out = (*base.value()).clone();
        for (t, &w) in terms.iter().zip(c.data()) {
            out.axpy(w, &t.value())?;
        }
        self.push(
            out,
            Op::Combine {
                base: base.id,
                terms: terms.iter().map(|t| t.id).collect(),
                coeffs: coeffs.id,
            },
            "combine",
        )
    }

    /// `base + Σᵢ coeffs[i] · terms[i]` with constant sparse terms.
    pub fn sparse_combine<'g>(
        &'g self,
        base: Var<'g, T>,
        terms: &[Arc<SparseTensor<T>>],
        coeffs: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let c = coeffs.value();
        if c.len() != terms.len() {
            return Err(Error::contract(format!(
                "sparse_combine: {} coefficients for {} terms",
                c.len(),
                terms.len()
            )));
        }
        let mut out = (*base.value()).clone();
        for (t, &w) in terms.iter().zip(c.data()) {
            if t.shape() != out.shape() {
                return Err(Error::shape("sparse_combine", out.shape(), t.shape()));
            }
            t.axpy_into(w, out.data_mut());
        }
        self.push(
            out,
            Op::SparseCombine {
                base: base.id,
                terms: terms.to_vec(),
                coeffs: coeffs.id,
            },
            "sparse_combine",
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy<'g>(&'g self, logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
        let lv = logits.value();
        let c = lv.cols();
        if lv.rows() != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: {} rows but {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        let mut total = T::zero();
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[y];
        }
        let loss = total / T::lit(labels.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Mean over rows of `−Σ_c p log p` (log clamped at [`ENTROPY_LOG_FLOOR`]).
    pub fn entropy<'g>(&'g self, probs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = probs.value();
        let loss = entropy_value(&v)?;
        self.push(Tensor::scalar(loss), Op::Entropy(probs.id), "entropy")
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    delta: impl FnOnce() -> Result<Tensor<T>>,
) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    let d = delta()?;
    match &mut grads[id] {
        Some(g) => g.axpy(T::one(), &d)?,
        slot @ None => *slot = Some(d),
    }
    Ok(())
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.clone();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            accumulate(nodes, grads, *a, || {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm_nt(m, n, k, g.data(), bv.data(), &mut d);
                Ok(Tensor::from_parts(vec![m, k], d))
            })?;
            accumulate(nodes, grads, *b, || {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm_tn(k, m, n, av.data(), g.data(), &mut d);
                Ok(Tensor::from_parts(vec![k, n], d))
            })?;
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || Ok(g.clone()))?;
            accumulate(nodes, grads, *b, || Ok(g.clone()))?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || Ok(g.clone()))?;
            accumulate(nodes, grads, *b, || Ok(g.scale(-T::one())))?;
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, || g.mul(&bv))?;
            accumulate(nodes, grads, *b, || g.mul(&av))?;
        }
        Op::AddBroadcast(a, b) => {
            accumulate(nodes, grads, *a, || Ok(g.clone()))?;
            let bv = val(*b);
            accumulate(nodes, grads, *b, || {
                let mut d = vec![T::zero(); bv.len()];
                for chunk in g.data().chunks(bv.len()) {
                    kernels::axpy(T::one(), chunk, &mut d);
                }
                Ok(Tensor::from_parts(bv.shape().to_vec(), d))
            })?;
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, || Ok(g.scale(*c)))?,
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                Ok(Tensor::from_parts(av.shape().to_vec(), d))
            })?;
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                Ok(Tensor::from_parts(av.shape().to_vec(), d))
            })?;
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let dim = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgamma = vec![T::zero(); dim];
            let mut dbeta = vec![T::zero(); dim];
            let inv_d = T::one() / T::lit(dim as f64);
            let mut xhat = vec![T::zero(); dim];
            let mut dxhat = vec![T::zero(); dim];
            for ((xr, gr), dxr) in xv.data().chunks(dim).zip(g.data().chunks(dim)).zip(dx.chunks_mut(dim)) {
                let (mean, rstd) = row_stats(xr, *eps);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..dim {
                    xhat[i] = (xr[i] - mean) * rstd;
                    dgamma[i] += gr[i] * xhat[i];
                    dbeta[i] += gr[i];
                    dxhat[i] = gr[i] * gv.data()[i];
                    sum_dxhat += dxhat[i];
                    sum_dxhat_xhat += dxhat[i] * xhat[i];
                }
                let m1 = sum_dxhat * inv_d;
                let m2 = sum_dxhat_xhat * inv_d;
                for i in 0..dim {
                    dxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            let gshape = gv.shape().to_vec();
            let bshape = val(*beta).shape().to_vec();
            accumulate(nodes, grads, *x, || Ok(Tensor::from_parts(xv.shape().to_vec(), dx)))?;
            accumulate(nodes, grads, *gamma, || Ok(Tensor::from_parts(gshape, dgamma)))?;
            accumulate(nodes, grads, *beta, || Ok(Tensor::from_parts(bshape, dbeta)))?;
        }
        Op::Softmax(a) => {
            accumulate(nodes, grads, *a, || {
                let c = out.cols();
                let mut d = vec![T::zero(); out.len()];
                for ((yr, gr), dr) in out.data().chunks(c).zip(g.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let s = kernels::dot(yr, gr);
                    for i in 0..c {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                Ok(Tensor::from_parts(out.shape().to_vec(), d))
            })?;
        }
        Op::CrossEntropy { logits, labels } => {
            let lv = val(*logits);
            let g0 = g.data()[0];
            accumulate(nodes, grads, *logits, || {
                let c = lv.cols();
                let scale = g0 / T::lit(labels.len() as f64);
                let mut d = lv.data().to_vec();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                Ok(Tensor::from_parts(lv.shape().to_vec(), d))
            })?;
        }
        Op::Entropy(a) => {
            let pv = val(*a);
            let g0 = g.data()[0];
            accumulate(nodes, grads, *a, || {
                let floor = T::lit(ENTROPY_LOG_FLOOR);
                let scale = g0 / T::lit(pv.rows() as f64);
                let d = pv
                    .data()
                    .iter()
                    .map(|&p| {
                        if p >= floor {
                            -(p.ln() + T::one()) * scale
                        } else {
                            -floor.ln() * scale
                        }
                    })
                    .collect();
                Ok(Tensor::from_parts(pv.shape().to_vec(), d))
            })?;
        }
        Op::Sum(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, || Ok(Tensor::full(&shape, g.data()[0])))?;
        }
        Op::Mean(a) => {
            let av = val(*a);
            let v = g.data()[0] / T::lit(av.len() as f64);
            accumulate(nodes, grads, *a, || Ok(Tensor::full(av.shape(), v)))?;
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                let inv = T::one() / T::lit(av.rows() as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let mut d = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    d.extend_from_slice(&row);
                }
                Ok(Tensor::from_parts(av.shape().to_vec(), d))
            })?;
        }
        Op::SliceRows { a, start } => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                let c = av.cols();
                let mut d = vec![T::zero(); av.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                Ok(Tensor::from_parts(av.shape().to_vec(), d))
            })?;
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let part = val(i);
                let n = part.len();
                let o = offset;
                accumulate(nodes, grads, i, || {
                    Ok(Tensor::from_parts(part.shape().to_vec(), g.data()[o..o + n].to_vec()))
                })?;
                offset += n;
            }
        }
        Op::PrependToken { tokens, cls, groups } => {
            let tv = val(*tokens);
            let cv = val(*cls);
            let d = tv.cols();
            let per = tv.rows() / groups;
            accumulate(nodes, grads, *tokens, || {
                let mut dt = Vec::with_capacity(tv.len());
                for gi in 0..*groups {
                    let start = (gi * (per + 1) + 1) * d;
                    dt.extend_from_slice(&g.data()[start..start + per * d]);
                }
                Ok(Tensor::from_parts(tv.shape().to_vec(), dt))
            })?;
            accumulate(nodes, grads, *cls, || {
                let mut dc = vec![T::zero(); d];
                for gi in 0..*groups {
                    let start = gi * (per + 1) * d;
                    kernels::axpy(T::one(), &g.data()[start..start + d], &mut dc);
                }
                Ok(Tensor::from_parts(cv.shape().to_vec(), dc))
            })?;
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, || Ok(Tensor::from_parts(shape, g.data().to_vec())))?;
        }
        Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (seq, heads) = (*seq, *heads);
            let d = qv.cols();
            let dh = d / heads;
            let groups = qv.rows() / seq;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); qv.len()];
            let mut dv = vec![T::zero(); qv.len()];
            let mut dp = vec![T::zero(); seq];
            for gi in 0..groups {
                for h in 0..heads {
                    let p = &probs[(gi * heads + h) * seq * seq..][..seq * seq];
                    for s in 0..seq {
                        let go = &g.data()[(gi * seq + s) * d + h * dh..][..dh];
                        let prow = &p[s * seq..(s + 1) * seq];
                        for t in 0..seq {
                            let base = (gi * seq + t) * d + h * dh;
                            kernels::axpy(prow[t], go, &mut dv[base..base + dh]);
                            dp[t] = kernels::dot(go, &vv.data()[base..base + dh]);
                        }
                        let s_dot = kernels::dot(prow, &dp);
                        let qbase = (gi * seq + s) * d + h * dh;
                        for t in 0..seq {
                            let ds = prow[t] * (dp[t] - s_dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kbase = (gi * seq + t) * d + h * dh;
                            kernels::axpy(ds, &kv.data()[kbase..kbase + dh], &mut dq[qbase..qbase + dh]);
                            kernels::axpy(ds, &qv.data()[qbase..qbase + dh], &mut dk[kbase..kbase + dh]);
                        }
                    }
                }
            }
            let shape = qv.shape().to_vec();
            accumulate(nodes, grads, *q, || Ok(Tensor::from_parts(shape.clone(), dq)))?;
            accumulate(nodes, grads, *k, || Ok(Tensor::from_parts(shape.clone(), dk)))?;
            accumulate(nodes, grads, *v, || Ok(Tensor::from_parts(shape.clone(), dv)))?;
        }
        Op::Combine {
            base,
            terms,
            coeffs,
        } => {
            accumulate(nodes, grads, *base, || Ok(g.clone()))?;
            let cv = val(*coeffs);
            for (&t, &w) in terms.iter().zip(cv.data()) {
                accumulate(nodes, grads, t, || Ok(g.scale(w)))?;
            }
            accumulate(nodes, grads, *coeffs, || {
                let d = terms
                    .iter()
                    .map(|&t| kernels::dot(g.data(), val(t).data()))
                    .collect();
                Ok(Tensor::from_parts(cv.shape().to_vec(), d))
            })?;
        }
        Op::SparseCombine {
            base,
            terms,
            coeffs,
        } => {
            accumulate(nodes, grads, *base, || Ok(g.clone()))?;
            let cv = val(*coeffs);
            accumulate(nodes, grads, *coeffs, || {
                let d = terms.iter().map(|t| t.dot_dense(g.data())).collect();
                Ok(Tensor::from_parts(cv.shape().to_vec(), d))
            })?;
        }
        Op::SparseMatMul { a, s } => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                let (n, r) = (av.rows(), av.cols());
                let c = g.cols();
                let mut d = vec![T::zero(); n * r];
                for (&flat, &v) in s.indices().iter().zip(s.values()) {
                    let (row, col) = (flat as usize / c, flat as usize % c);
                    for i in 0..n {
                        d[i * r + row] += g.data()[i * c + col] * v;
                    }
                }
                Ok(Tensor::from_parts(av.shape().to_vec(), d))
            })?;
        }
    }
    Ok(())
}

/// Mean per-row entropy of a probability matrix, validating each row.
pub fn entropy_value<T: Real>(probs: &Tensor<T>) -> Result<T> {
    let c = probs.cols();
    let tol = T::lit(1e-5);
    let floor = T::lit(ENTROPY_LOG_FLOOR);
    let mut total = T::zero();
    for (r, row) in probs.data().chunks(c).enumerate() {
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs() > tol || row.iter().any(|&p| p < T::zero()) {
            return Err(Error::contract(format!(
                "entropy: row {r} is not a probability vector (sum {s})"
            )));
        }
        for &p in row {
            total -= p * p.max(floor).ln();
        }
    }
    Ok(total / T::lit(probs.rows() as f64))
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands belong to different graphs"))
        }
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let v = self.value().matmul(&other.value())?;
        self.graph.push(v, Op::MatMul(self.id, other.id), "matmul")
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let v = self.value().add(&other.value())?;
        self.graph.push(v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let v = self.value().sub(&other.value())?;
        self.graph.push(v, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let v = self.value().mul(&other.value())?;
        self.graph.push(v, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds `other` tiled over leading rows (bias add when `other` is a vector).
    pub fn add_broadcast(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let v = self.value().add_broadcast(&other.value())?;
        self.graph.push(v, Op::AddBroadcast(self.id, other.id), "add_broadcast")
    }

    /// Affine map `self · w + b`.
    pub fn linear(self, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul(w)?.add_broadcast(b)
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        let v = self.value().scale(c);
        self.graph.push(v, Op::Scale(self.id, c), "scale")
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        let v = self.value().relu();
        self.graph.push(v, Op::Relu(self.id), "relu")
    }

    pub fn gelu(self) -> Result<Var<'g, T>> {
        let v = self.value().gelu();
        self.graph.push(v, Op::Gelu(self.id), "gelu")
    }

    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let v = self.value().layer_norm(&gamma.value(), &beta.value(), eps)?;
        self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            "layer_norm",
        )
    }

    pub fn softmax(self) -> Result<Var<'g, T>> {
        let v = self.value().softmax_lastdim();
        self.graph.push(v, Op::Softmax(self.id), "softmax")
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push(v, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let v = Tensor::scalar(self.value().mean());
        self.graph.push(v, Op::Mean(self.id), "mean")
    }

    /// `[r×c] → [c]` average over rows.
    pub fn mean_rows(self) -> Result<Var<'g, T>> {
        let v = self.value().mean_rows();
        self.graph.push(v, Op::MeanRows(self.id), "mean_rows")
    }

    pub fn slice_rows(self, start: usize, count: usize) -> Result<Var<'g, T>> {
        let v = self.value().slice_rows(start, count)?;
        self.graph.push(v, Op::SliceRows { a: self.id, start }, "slice_rows")
    }

    /// `self · s` for a constant sparse matrix `s`.
    pub fn matmul_sparse(self, s: &Arc<SparseTensor<T>>) -> Result<Var<'g, T>> {
        let a = self.value();
        let cols = *s.shape().last().unwrap_or(&1);
        let mut out = Tensor::zeros(&[a.rows(), cols]);
        s.left_matmul_into(&a, &mut out)?;
        self.graph.push(
            out,
            Op::SparseMatMul {
                a: self.id,
                s: Arc::clone(s),
            },
            "sparse_matmul",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        self.graph.push(v, Op::Reshape(self.id), "reshape")
    }
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` maximized over elements.
pub fn max_relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::randn(&[3, 4], 1.0, &mut rng()));
        let loss = x.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[3, 4]));
    }

    #[test]
    fn quadratic_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.param(Tensor::vector(vec![3.0]));
        let grads = g.backward(x.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(y), Tensor::zeros(&[1]));
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::<f64>::randn(&[5], 1.0, &mut rng());
        let fd = finite_diff_grad(|t| t.sum(), &x, 1e-3);
        assert!(fd.max_abs_diff(&Tensor::ones(&[5])).unwrap() < 1e-9);
        let fd = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::vector(vec![3.0f64]), 1e-4);
        assert!((fd.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn overflow_is_an_error() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![3.0e38f32]));
        assert!(matches!(x.add(x), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn entropy_values() {
        let onehot = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(entropy_value(&onehot).unwrap(), 0.0);
        let uniform = Tensor::new(vec![1, 2], vec![0.5f64, 0.5]).unwrap();
        assert!((entropy_value(&uniform).unwrap() - 2f64.ln()).abs() < 1e-12);
        let skew = Tensor::new(vec![1, 2], vec![0.9f64, 0.1]).unwrap();
        let want = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy_value(&skew).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.32508).abs() < 1e-5);
        let bad = Tensor::new(vec![1, 2], vec![0.7f64, 0.7]).unwrap();
        assert!(entropy_value(&bad).is_err());
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut r = rng();
            let g = Graph::<f64>::new();
            let x = g.param(Tensor::randn(&[6, 8], 1.0, &mut r));
            let w = g.param(Tensor::randn(&[8, 8], 0.3, &mut r));
            let y = x.matmul(w).unwrap().gelu().unwrap().softmax().unwrap();
            let loss = g.entropy(y).unwrap();
            let grads = g.backward(loss).unwrap();
            (grads.wrt(x), grads.wrt(w))
        };
        assert_eq!(run(), run());
    }
}
