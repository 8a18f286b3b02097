//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its output
//! value, so node order is already a topological order and the backward pass
//! walks it in reverse. Parameters live outside the graph in a [`ParamSet`];
//! binding a parameter creates (at most once per graph) a leaf node, and
//! [`Graph::backward`] adds the leaf gradients into the parameter gradient
//! buffers. Graphs are rebuilt per training example.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, COS_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_requires_grad(),
            trainable: true,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Frozen parameters bind as constants and receive no gradient.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for e in &self.entries {
            e.name.bytes().for_each(&mut eat);
            for &s in e.tensor.shape() {
                (s as u64).to_le_bytes().into_iter().for_each(&mut eat);
            }
            for v in e.tensor.values() {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Lerp { a: Var, b: Var, beta: T },
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Rc<[usize]> },
    MeanRows(Var),
    Cosine(Var, Var),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Vec<T> },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. See the module docs.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    last_visits: Vec<u32>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            last_visits: Vec::new(),
        }
    }

    /// A graph that records values only; nothing in it requires a gradient.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Parameter values and gradients are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.last_visits.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Per-node visit counts of the most recent backward pass.
    pub fn backward_visits(&self) -> &[u32] {
        &self.last_visits
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = if t.grad().is_some() { t.detached() } else { t };
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that requires a gradient but is not a parameter; its gradient is
    /// available through [`Graph::backward_with_grads`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let t = t.detached();
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter. Repeated binds return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = params.get(id).detached();
        let v = self.push(value, Op::Param(id), params.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims("transpose")?;
        let values = tensor::transpose_values(self.value(x).values(), r, c);
        let out = Tensor::matrix(c, r, values)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = ta.cols();
        if tr.len() != d {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut values = ta.values().to_vec();
        for chunk in values.chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(tr.values()) {
                *v += b;
            }
        }
        let out = Tensor::new(ta.shape(), values)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let tx = self.value(x);
        let values = tx.values().iter().map(|&v| v * c).collect();
        let out = Tensor::new(tx.shape(), values).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `(1 - beta) * a + beta * b`, elementwise.
    pub fn lerp(&mut self, a: Var, b: Var, beta: T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("lerp", ta.shape(), tb.shape()));
        }
        let keep = T::one() - beta;
        // endpoints copy exactly, preserving signed zeros
        let values = if beta == T::one() {
            tb.values().to_vec()
        } else if beta == T::zero() {
            ta.values().to_vec()
        } else {
            ta.values().iter().zip(tb.values()).map(|(&x, &y)| keep * x + beta * y).collect()
        };
        let out = Tensor::new(ta.shape(), values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Lerp { a, b, beta }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax where entries with a false mask bit get probability 0.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Var {
        let tx = self.value(x);
        let values = tensor::softmax_rows_kernel(tx.values(), tx.cols(), mask.as_deref());
        let out = Tensor::new(tx.shape(), values).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = tensor::rms_norm(self.value(x), self.value(gain))?;
        let tx = self.value(x);
        let inv_rms = tensor::inv_rms_rows(tx.values(), tx.cols());
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::DegenerateInput("concat_rows of nothing"))?;
        let d = self.value(first).cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d || t.shape().len() > 2 {
                return Err(Error::dim("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            values.extend_from_slice(t.values());
        }
        let out = Tensor::matrix(rows, d, values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if len == 0 || start + len > tx.rows() {
            return Err(Error::dim("slice_rows", tx.shape(), &[start, len]));
        }
        let values = tx.values()[start * d..(start + len) * d].to_vec();
        let out = Tensor::matrix(len, d, values)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.matrix_dims("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::dim("slice_cols", tx.shape(), &[start, width]));
        }
        let mut values = Vec::with_capacity(r * width);
        for row in tx.values().chunks(c) {
            values.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::matrix(r, width, values)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::DegenerateInput("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.matrix_dims("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::DegenerateInput("gather_rows needs at least one id"));
        }
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, vocab_size: n });
            }
            values.extend_from_slice(tt.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, values)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.into() }, rg))
    }

    /// Mean over rows, as a length-`d` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = tx.matrix_dims("mean_rows")?;
        if r == 0 {
            return Err(Error::DegenerateInput("mean over zero rows"));
        }
        let mut acc = vec![T::zero(); d];
        for row in tx.values().chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(acc), Op::MeanRows(x), rg))
    }

    /// Scalar cosine similarity of two equal-length tensors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let c = tensor::cosine_similarity(self.value(u).values(), self.value(v).values())?;
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), rg))
    }

    /// Mean token cross-entropy of logit rows against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = tl.matrix_dims("cross_entropy")?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::Alignment {
                logits: rows,
                targets: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab_size: v });
        }
        let probs = tensor::softmax_rows_kernel(tl.values(), v, None);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss /= T::lit(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`, accumulating into parameter grads.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        self.backward_with_grads(loss, params).map(|_| ())
    }

    /// Like [`Graph::backward`] but also returns the gradient of every node
    /// (indexed by node), for inspecting non-parameter inputs.
    pub fn backward_with_grads(
        &mut self,
        loss: Var,
        params: &mut ParamSet<T>,
    ) -> Result<Vec<Option<Vec<T>>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "scalar loss",
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            visits[idx] += 1;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.get_mut(*id).accumulate_grad(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (p, q) = ta.matrix_dims("matmul")?;
                    let r = tb.cols();
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, p * q);
                        tensor::matmul_nt_acc(&g, tb.values(), p, q, r, ga);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, q * r);
                        tensor::matmul_tn_acc(ta.values(), &g, p, q, r, gb);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = self.value(*x).matrix_dims("transpose")?;
                    let back = tensor::transpose_values(&g, c, r);
                    add_into(slot(&mut grads, *x, r * c), &back);
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.rg(x) {
                            add_into(slot(&mut grads, x, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.rg(*row) {
                        let d = self.value(*row).len();
                        let gr = slot(&mut grads, *row, d);
                        for chunk in g.chunks(d) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (o, &v) in gx.iter_mut().zip(&g) {
                        *o += v * *c;
                    }
                }
                Op::Lerp { a, b, beta } => {
                    let keep = T::one() - *beta;
                    for (x, w) in [(*a, keep), (*b, *beta)] {
                        if self.rg(x) {
                            let gx = slot(&mut grads, x, g.len());
                            for (o, &v) in gx.iter_mut().zip(&g) {
                                *o += v * w;
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.values();
                    let c = node.value.cols();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - s);
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gain);
                    let d = tx.cols();
                    let dt = T::lit(d as f64);
                    if self.rg(*gain) {
                        let gg = slot(&mut grads, *gain, d);
                        for ((xr, gr), &s) in tx.values().chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                            for ((o, &xv), &gv) in gg.iter_mut().zip(xr).zip(gr) {
                                *o += gv * xv * s;
                            }
                        }
                    }
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, tx.len());
                        for (((xr, gr), or), &s) in tx
                            .values()
                            .chunks(d)
                            .zip(g.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .zip(inv_rms)
                        {
                            let proj: T = xr
                                .iter()
                                .zip(gr)
                                .zip(tg.values())
                                .map(|((&xv, &gv), &w)| gv * w * xv)
                                .sum();
                            let k = proj * s * s * s / dt;
                            for (((o, &xv), &gv), &w) in or.iter_mut().zip(xr).zip(gr).zip(tg.values()) {
                                *o += gv * w * s - xv * k;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &xv), &gv) in gx.iter_mut().zip(tx.values()).zip(&g) {
                        *o += gv * tensor::gelu_grad_scalar(xv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.rg(p) {
                            add_into(slot(&mut grads, p, len), &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let gx = slot(&mut grads, *x, tx.len());
                    add_into(&mut gx[start * d..start * d + g.len()], &g);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let gp = slot(&mut grads, p, rows * w);
                            for r in 0..rows {
                                add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                            }
                        }
                        col += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let w = node.value.cols();
                    let gx = slot(&mut grads, *x, tx.len());
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], gr);
                    }
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = slot(&mut grads, *table, tt.len());
                    for (&id, gr) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[id * d..(id + 1) * d], gr);
                    }
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let inv = T::one() / T::lit(tx.rows() as f64);
                    let gx = slot(&mut grads, *x, tx.len());
                    for chunk in gx.chunks_mut(d) {
                        for (o, &gv) in chunk.iter_mut().zip(&g) {
                            *o += gv * inv;
                        }
                    }
                }
                Op::Cosine(u, v) => {
                    let (tu, tv) = (self.value(*u).values(), self.value(*v).values());
                    let (_, dotv, nu, nv, flat) = tensor::cosine_parts(tu, tv);
                    if !flat {
                        let eps = T::lit(COS_EPS);
                        let den = (nu * nv).max(eps);
                        let clamped = nu * nv < eps;
                        let up = g[0];
                        for (x, this, other, n_this) in [(*u, tu, tv, nu), (*v, tv, tu, nv)] {
                            if !self.rg(x) {
                                continue;
                            }
                            let gx = slot(&mut grads, x, this.len());
                            let radial = if n_this > T::zero() && !clamped {
                                dotv / (den * n_this * n_this)
                            } else {
                                T::zero()
                            };
                            for ((o, &a), &b) in gx.iter_mut().zip(this).zip(other) {
                                *o += up * (b / den - radial * a);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = self.value(*logits).cols();
                    let inv = g[0] / T::lit(targets.len() as f64);
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut p = probs[r * v + j];
                            if j == t {
                                p -= T::one();
                            }
                            gl[r * v + j] += p * inv;
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    let gx = slot(&mut grads, *x, len);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            grads[idx] = Some(g);
        }
        self.last_visits = visits;
        Ok(grads)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}
