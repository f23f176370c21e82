//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass as a node
//! holding its output value and enough saved state to run its backward rule.
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Trainable tensors live in a [`ParamStore`] outside the graph. They enter a
//! graph through [`Graph::param`] (dense copy) or [`Graph::gather`] (row
//! lookup), and the backward sweep accumulates into the store's gradient
//! buffers. A graph is meant to be built per batch and then dropped.

use rand::Rng;

use super::ops::{sigmoid, softmax_in_place, DIRECTION_EPS};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Project {
        a: Var,
        b: Var,
        complement: bool,
        passthrough: bool,
    },
    RowCosine { x: Var, m: Var },
    Bce { p: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed backwards by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf. Gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, false, "input")
    }

    /// A dense copy of a registered parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        self.push(value, Op::Param(id), true, "param")
    }

    /// Rows `ids` of a `[V, d]` parameter table. Backward scatter-adds.
    pub fn gather(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = store.get(table);
        let (v, d) = t.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, bound: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            value,
            Op::Gather {
                param: table,
                ids: ids.to_vec(),
            },
            true,
            "gather",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if bv.len() == av.last_dim() && bv.last_dim() == av.last_dim() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(op, av.shape(), bv.shape()))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let kind = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let c = av.last_dim().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % c],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, kind))
    }

    /// `a + b`, where `b` may be a scalar or a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, kind) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b, kind), rg, "add")
    }

    /// `a ⊙ b`, with the same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, kind) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b, kind), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: fn(f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(value, op, rg, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// Softmax over the last axis, row by row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let mut value = av.clone();
        let c = value.last_dim();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.value(first).shape(), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(value, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Stacks parts along the first axis. 1-d parts count as one row each.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero parts".into()))?;
        let c = self.value(first).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, pc) = v.dims2();
            if pc != c || v.shape().len() > 2 {
                return Err(Error::dim("concat_rows", self.value(first).shape(), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity
    /// outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Dropout(a, mask), rg, "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Mean over the rows of a `[r, c]` tensor, giving `[c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if r == 0 {
            return Err(Error::InvalidArgument("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::MeanRows(a), rg, "mean_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() > 2 {
            return Err(Error::dim("transpose", av.shape(), &[]));
        }
        let (r, c) = av.dims2();
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", av.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for row in av.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![r, end - start], out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg, "slice_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(shape.to_vec(), av.data().to_vec())
            .map_err(|_| Error::dim("reshape", av.shape(), shape))?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Row-wise projection of `a: [T, d]` onto the direction `b: [d]`, or onto
    /// its orthogonal complement when `complement` is set.
    ///
    /// When `|b| <= 1e-12` the op fails, unless `passthrough_degenerate` is
    /// set, in which case rows of `a` pass through unchanged.
    pub fn project_rows(&mut self, a: Var, b: Var, complement: bool, passthrough_degenerate: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = bv.len();
        if av.last_dim() != d {
            return Err(Error::dim("project", av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let nn = dot(bd, bd);
        let degenerate = nn.sqrt() <= DIRECTION_EPS;
        if degenerate && !passthrough_degenerate {
            return Err(Error::DegenerateScenario(nn.sqrt()));
        }
        let mut out = av.data().to_vec();
        if !degenerate {
            for row in out.chunks_mut(d) {
                let s = dot(row, bd) / nn;
                for (o, y) in row.iter_mut().zip(bd) {
                    *o = if complement { *o - s * y } else { s * y };
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push(
            value,
            Op::Project {
                a,
                b,
                complement,
                passthrough: degenerate,
            },
            rg,
            "project",
        )
    }

    /// Cosine similarity of `x: [d]` against every row of `m: [q, d]`.
    /// Pairs involving a near-zero vector score 0 and pass no gradient.
    pub fn row_cosine(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        let d = xv.len();
        let (q, md) = mv.dims2();
        if md != d {
            return Err(Error::dim("row_cosine", xv.shape(), mv.shape()));
        }
        let xd = xv.data();
        let nx = dot(xd, xd).sqrt();
        let out = (0..q)
            .map(|j| {
                let row = mv.row(j);
                let nm = dot(row, row).sqrt();
                if nx <= DIRECTION_EPS || nm <= DIRECTION_EPS {
                    0.0
                } else {
                    dot(xd, row) / (nx * nm)
                }
            })
            .collect();
        let rg = self.rg(&[x, m]);
        self.push(Tensor::vector(out), Op::RowCosine { x, m }, rg, "row_cosine")
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the log.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce", pv.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        let loss = bce_value(pv.data(), labels);
        let rg = self.rg(&[p]);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
            "bce",
        )
    }

    /// Reverse sweep from a scalar `loss`, accumulating parameter gradients
    /// into `store`. Parameters without a gradient buffer get a zeroed one, so
    /// every registered parameter has a gradient afterwards.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_buf(id);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, b) in store.grad_buf(*id).iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Gather { param, ids } => {
                let d = out.last_dim();
                let buf = store.grad_buf(*param);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in buf[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.last_dim();
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let ga = self.grad_slot(grads, *a);
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let gb = self.grad_slot(grads, *b);
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b, kind) => {
                if self.requires_grad(*a) {
                    add_into(self.grad_slot(grads, *a), g);
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_slot(grads, *b);
                    reduce_into(gb, g, *kind);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.last_dim().max(1);
                let bd = bv.data();
                let bval = |i: usize| match kind {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % c],
                };
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * bval(i);
                    }
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    reduce_into(self.grad_slot(grads, *b), &prod, *kind);
                }
            }
            Op::Scale(a, c) => {
                let ga = self.grad_slot(grads, *a);
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += c * x;
                }
            }
            Op::Relu(a) => {
                let ga = self.grad_slot(grads, *a);
                for ((o, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = self.grad_slot(grads, *a);
                for ((o, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += x * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.grad_slot(grads, *a);
                for ((o, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += x * y * (1.0 - y);
                }
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                let ga = self.grad_slot(grads, *a);
                for ((o, gr), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let gy = dot(gr, y);
                    for j in 0..c {
                        o[j] += y[j] * (gr[j] - gy);
                    }
                }
            }
            Op::Concat(parts) => {
                let w = out.last_dim();
                let rows = if w == 0 { 0 } else { out.len() / w };
                let mut off = 0;
                for &p in parts {
                    let pw = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let gp = self.grad_slot(grads, p);
                        for r in 0..rows {
                            add_into(&mut gp[r * pw..(r + 1) * pw], &g[r * w + off..r * w + off + pw]);
                        }
                    }
                    off += pw;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        add_into(self.grad_slot(grads, p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.grad_slot(grads, *a);
                for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += x * m;
                }
            }
            Op::Sum(a) => {
                let ga = self.grad_slot(grads, *a);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::MeanRows(a) => {
                let c = out.len();
                let ga = self.grad_slot(grads, *a);
                let r = ga.len() / c;
                for row in ga.chunks_mut(c) {
                    for (o, x) in row.iter_mut().zip(g) {
                        *o += x / r as f64;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                let ga = self.grad_slot(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.value(*a).last_dim();
                let w = end - start;
                let ga = self.grad_slot(grads, *a);
                for (row, gr) in ga.chunks_mut(c).zip(g.chunks(w)) {
                    add_into(&mut row[*start..*end], gr);
                }
            }
            Op::Reshape(a) => add_into(self.grad_slot(grads, *a), g),
            Op::Project {
                a,
                b,
                complement,
                passthrough,
            } => {
                if *passthrough {
                    if self.requires_grad(*a) {
                        add_into(self.grad_slot(grads, *a), g);
                    }
                    return;
                }
                let (av, bv) = (self.value(*a), self.value(*b));
                let bd = bv.data();
                let d = bd.len();
                let nn = dot(bd, bd);
                let sign = if *complement { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (o, gr) in ga.chunks_mut(d).zip(g.chunks(d)) {
                        let gb = dot(gr, bd) / nn;
                        for j in 0..d {
                            let proj = bd[j] * gb;
                            o[j] += if *complement { gr[j] - proj } else { proj };
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // p = (a·b / b·b) b
                    // ∂L/∂b = a (g·b)/n + s g / n - 2 s (g·b) b / n², s = a·b
                    let mut acc = vec![0.0; d];
                    for (row, gr) in av.data().chunks(d).zip(g.chunks(d)) {
                        let s = dot(row, bd);
                        let gbd = dot(gr, bd);
                        for j in 0..d {
                            acc[j] += row[j] * gbd / nn + s * gr[j] / nn - 2.0 * s * gbd * bd[j] / (nn * nn);
                        }
                    }
                    let gb = self.grad_slot(grads, *b);
                    for (o, x) in gb.iter_mut().zip(acc) {
                        *o += sign * x;
                    }
                }
            }
            Op::RowCosine { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let xd = xv.data();
                let d = xd.len();
                let nx = dot(xd, xd).sqrt();
                if nx <= DIRECTION_EPS {
                    return;
                }
                let q = out.len();
                let mut gx = vec![0.0; d];
                let mut gm = vec![0.0; q * d];
                for j in 0..q {
                    let row = mv.row(j);
                    let nm = dot(row, row).sqrt();
                    if nm <= DIRECTION_EPS || g[j] == 0.0 {
                        continue;
                    }
                    let c = out.data()[j];
                    for k in 0..d {
                        gx[k] += g[j] * (row[k] / (nx * nm) - c * xd[k] / (nx * nx));
                        gm[j * d + k] += g[j] * (xd[k] / (nx * nm) - c * row[k] / (nm * nm));
                    }
                }
                if self.requires_grad(*x) {
                    add_into(self.grad_slot(grads, *x), &gx);
                }
                if self.requires_grad(*m) {
                    add_into(self.grad_slot(grads, *m), &gm);
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let n = labels.len() as f64;
                let gp = self.grad_slot(grads, *p);
                for ((o, &pr), &y) in gp.iter_mut().zip(pv.data()).zip(labels) {
                    if pr <= BCE_CLAMP || pr >= 1.0 - BCE_CLAMP {
                        continue;
                    }
                    *o += -g[0] * (y / pr - (1.0 - y) / (1.0 - pr)) / n;
                }
            }
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

const BCE_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy with the same clamp as [`Graph::bce`].
pub fn bce_value(p: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    -p.iter()
        .zip(labels)
        .map(|(&pr, &y)| {
            let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
        })
        .sum::<f64>()
        / n
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn reduce_into(dst: &mut [f64], g: &[f64], kind: Broadcast) {
    match kind {
        Broadcast::Same => add_into(dst, g),
        Broadcast::Scalar => dst[0] += g.iter().sum::<f64>(),
        Broadcast::Row => {
            let c = dst.len();
            for row in g.chunks(c) {
                add_into(dst, row);
            }
        }
    }
}
