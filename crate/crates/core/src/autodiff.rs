//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node after its inputs, so the node vector is
//! already in topological order and the backward pass simply walks it in
//! reverse. Gradients accumulate additively, which handles fan-out.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_row_in_place, Real, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary operations between equally shaped tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Key mask shared by every group and head of an attention call:
/// `allowed[i * len + j]` says whether query row `i` may attend to key `j`.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    len: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::pre(format!(
                "mask for sequence length {len} needs {} entries, got {}",
                len * len,
                allowed.len()
            )));
        }
        for i in 0..len {
            if !allowed[i * len..(i + 1) * len].iter().any(|&a| a) {
                return Err(Error::FullyMasked { row: i });
            }
        }
        Ok(AttentionMask { len, allowed: allowed.into() })
    }

    /// Every row may attend only to keys `0..prefix`.
    pub fn key_prefix(len: usize, prefix: usize) -> Result<Self> {
        let allowed = (0..len * len).map(|ij| ij % len < prefix).collect();
        Self::new(len, allowed)
    }

    /// Row `i` may attend to keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|ij| ij % len <= ij / len).collect();
        AttentionMask { len, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.len..(query + 1) * self.len]
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        table: Var,
        index: Arc<[usize]>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Tracked leaves receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::pre(format!("matmul shape mismatch: {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::pre(format!(
                "elementwise {op:?} shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let f = |x: T, y: T| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Binary(op, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(value, Op::AddScalar(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix();
        if self.value(row).len() != n {
            return Err(Error::pre(format!(
                "add_row: row of length {} for matrix with {n} columns",
                self.value(row).len()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += b;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Row-wise softmax. Masked entries (`false`) are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.as_matrix();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::pre(format!(
                    "softmax mask has {} entries for a {r}×{c} input",
                    m.len()
                )));
            }
        }
        let mut data = t.data().to_vec();
        for i in 0..r {
            let allowed = mask.map(|m| &m[i * c..(i + 1) * c]);
            if !softmax_row_in_place(&mut data[i * c..(i + 1) * c], allowed) {
                return Err(Error::FullyMasked { row: i });
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Softmax(a), tracked))
    }

    /// Standardizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = t.shape().last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::pre("layer_norm over an empty last axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::pre(format!(
                "layer_norm: gain/bias lengths {}/{} for last extent {d}",
                self.value(gain).len(),
                self.value(bias).len()
            )));
        }
        let rows = t.len() / d;
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.len()];
        for i in 0..rows {
            let x = &t.data()[i * d..(i + 1) * d];
            let mean = x.iter().copied().sum::<T>() * inv_d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (x[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let tracked = self.tracked(a) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(value, Op::LayerNorm { input: a, gain, bias, xhat, rstd }, tracked))
    }

    /// Multi-head scaled dot-product attention core.
    ///
    /// `q`, `k`, `v` are `(groups·len)×d` matrices holding `groups`
    /// independent sequences of `len = mask.len()` tokens. Each of the
    /// `heads` heads uses a contiguous `d/heads` column slice; logits are
    /// scaled by `1/sqrt(d/heads)`. The output has the shape of `q`, with
    /// heads concatenated back along the columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        if shape.len() != 2 || self.value(k).shape() != shape || self.value(v).shape() != shape {
            return Err(Error::pre(format!(
                "attention expects equal 2-D q/k/v, got {:?}, {:?}, {:?}",
                shape,
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        if groups == 0 || rows % groups != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::pre(format!(
                "attention: {rows} rows / {groups} groups, width {d} / {heads} heads"
            )));
        }
        let len = rows / groups;
        if let Some(m) = mask {
            if m.len() != len {
                return Err(Error::pre(format!(
                    "attention mask for length {} applied to sequences of length {len}",
                    m.len()
                )));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); groups * heads * len * len];
        let mut out = vec![T::zero(); rows * d];
        let mut qb = vec![T::zero(); len * dh];
        let mut kb = vec![T::zero(); len * dh];
        let mut vb = vec![T::zero(); len * dh];
        let mut ob = vec![T::zero(); len * dh];
        for g in 0..groups {
            for h in 0..heads {
                gather_block(qd, &mut qb, g, h, len, d, dh);
                gather_block(kd, &mut kb, g, h, len, d, dh);
                gather_block(vd, &mut vb, g, h, len, d, dh);
                let p = &mut probs[(g * heads + h) * len * len..(g * heads + h + 1) * len * len];
                gemm_nt_acc(&qb, &kb, p, len, dh, len);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    if !softmax_row_in_place(row, mask.map(|m| m.row(i))) {
                        return Err(Error::FullyMasked { row: i });
                    }
                }
                ob.iter_mut().for_each(|x| *x = T::zero());
                gemm_acc(p, &vb, &mut ob, len, len, dh);
                scatter_block(&ob, &mut out, g, h, len, d, dh, false);
            }
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(value, Op::Attention { q, k, v, groups, heads, probs }, tracked))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// as `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[i] = table[index[i]]` over matrix rows.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = t.as_matrix();
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::pre(format!("gather_rows: row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        let tracked = self.tracked(table);
        Ok(self.push(value, Op::GatherRows { table, index: index.into() }, tracked))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::pre("concat_rows of nothing"));
        };
        let (_, c) = self.value(first).as_matrix();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).as_matrix();
            if pc != c {
                return Err(Error::pre(format!("concat_rows: {pc} columns vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len().max(1) as f64);
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Mean over all components of the squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Populates gradients of `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::pre(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    gemm_nt_acc(g, tb.data(), slot(grads, *a, m * k), m, n, k);
                }
                if want(*b) {
                    gemm_tn_acc(ta.data(), g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::Binary(op, a, b) => {
                let len = g.len();
                match op {
                    Elementwise::Add | Elementwise::Sub => {
                        if want(*a) {
                            axpy(slot(grads, *a, len), g, T::one());
                        }
                        if want(*b) {
                            let s = if *op == Elementwise::Add { T::one() } else { -T::one() };
                            axpy(slot(grads, *b, len), g, s);
                        }
                    }
                    Elementwise::Mul => {
                        if want(*a) {
                            let bv = nodes[b.0].value.data();
                            let ga = slot(grads, *a, len);
                            for i in 0..len {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                        if want(*b) {
                            let av = nodes[a.0].value.data();
                            let gb = slot(grads, *b, len);
                            for i in 0..len {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    axpy(slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::AddScalar(a) => {
                if want(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = nodes[a.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
                if want(*row) {
                    let n = nodes[row.0].value.len();
                    let gr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        axpy(gr, chunk, T::one());
                    }
                }
            }
            Op::Softmax(input) => {
                if want(*input) {
                    let y = node.value.data();
                    let (_, c) = node.value.as_matrix();
                    let ga = slot(grads, *input, g.len());
                    for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, xhat, rstd } => {
                let d = nodes[gain.0].value.len();
                let gv = nodes[gain.0].value.data();
                if want(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if want(*bias) {
                    let gb = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        axpy(gb, gr, T::one());
                    }
                }
                if want(*input) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let gx = slot(grads, *input, g.len());
                    for (i, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dx = T::zero();
                        let mut mean_dx_x = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dx += dxh;
                            mean_dx_x += dxh * xr[j];
                        }
                        mean_dx *= inv_d;
                        mean_dx_x *= inv_d;
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            out[j] += rstd[i] * (dxh - mean_dx - xr[j] * mean_dx_x);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                self.attention_backward(*q, *k, *v, *groups, *heads, probs, g, grads);
            }
            Op::GatherRows { table, index } => {
                if want(*table) {
                    let t = &nodes[table.0].value;
                    let (_, c) = t.as_matrix();
                    let gt = slot(grads, *table, t.len());
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], T::one());
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if want(p) {
                        axpy(slot(grads, p, n), &g[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let n = nodes[a.0].value.len();
                    slot(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = nodes[a.0].value.len();
                    let s = g[0] / T::lit(n.max(1) as f64);
                    slot(grads, *a, n).iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (rows, d) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
        let len = rows / groups;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gv = vec![T::zero(); rows * d];
        let mut qb = vec![T::zero(); len * dh];
        let mut kb = vec![T::zero(); len * dh];
        let mut vb = vec![T::zero(); len * dh];
        let mut gob = vec![T::zero(); len * dh];
        let mut dp = vec![T::zero(); len * len];
        let mut blk = vec![T::zero(); len * dh];
        for gi in 0..groups {
            for h in 0..heads {
                let p = &probs[(gi * heads + h) * len * len..(gi * heads + h + 1) * len * len];
                gather_block(qd, &mut qb, gi, h, len, d, dh);
                gather_block(kd, &mut kb, gi, h, len, d, dh);
                gather_block(vd, &mut vb, gi, h, len, d, dh);
                gather_block(g, &mut gob, gi, h, len, d, dh);
                // dV = Pᵀ·dO
                blk.iter_mut().for_each(|x| *x = T::zero());
                gemm_tn_acc(p, &gob, &mut blk, len, len, dh);
                scatter_block(&blk, &mut gv, gi, h, len, d, dh, true);
                // dP = dO·Vᵀ, then through the softmax
                dp.iter_mut().for_each(|x| *x = T::zero());
                gemm_nt_acc(&gob, &vb, &mut dp, len, dh, len);
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                blk.iter_mut().for_each(|x| *x = T::zero());
                gemm_acc(&dp, &kb, &mut blk, len, len, dh);
                scatter_block(&blk, &mut gq, gi, h, len, d, dh, true);
                blk.iter_mut().for_each(|x| *x = T::zero());
                gemm_tn_acc(&dp, &qb, &mut blk, len, len, dh);
                scatter_block(&blk, &mut gk, gi, h, len, d, dh, true);
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[var.0].tracked {
                axpy(slot(grads, var, rows * d), &buf, T::one());
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn gather_block<T: Real>(src: &[T], dst: &mut [T], g: usize, h: usize, len: usize, d: usize, dh: usize) {
    for i in 0..len {
        let row = (g * len + i) * d + h * dh;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_block<T: Real>(
    src: &[T],
    dst: &mut [T],
    g: usize,
    h: usize,
    len: usize,
    d: usize,
    dh: usize,
    accumulate: bool,
) {
    for i in 0..len {
        let row = (g * len + i) * d + h * dh;
        let out = &mut dst[row..row + dh];
        let s = &src[i * dh..(i + 1) * dh];
        if accumulate {
            axpy(out, s, T::one());
        } else {
            out.copy_from_slice(s);
        }
    }
}
