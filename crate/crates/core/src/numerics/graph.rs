//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and the backward pass is a single
//! reverse sweep. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; gradients are accumulated in place into lazily allocated buffers.

use super::crf;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    MaxRows(Var, Vec<usize>),
    LogSoftmax(Var),
    Softmax(Var),
    Gather(Var, Vec<(usize, usize, f64)>),
    Crf {
        emissions: Var,
        transitions: Var,
        unary: Vec<f64>,
        pairwise: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn row(&mut self, data: Vec<f64>) -> Result<Var> {
        self.constant(Tensor::row(data)?)
    }

    /// Trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", c, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a [m x n] + row [1 x n]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if self.value(row).shape() != [1, n] {
            return Err(Error::shape(
                "add_row",
                format!("[{m}x{n}] + {:?}", self.value(row).shape()),
            ));
        }
        let ta = self.value(a);
        let r = self.value(row).data();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(vec![m, n], data);
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", t, Op::AddRow(a, row), rg)
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push("affine", t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(name, t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p);
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push("slice_cols", Tensor::from_parts(vec![m, len], data), Op::SliceCols(x, start), rg)
    }

    /// Vertical stacking of tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::shape("concat_rows", format!("col counts {n} vs {}", t.cols())));
            }
            data.extend_from_slice(t.data());
        }
        let m = data.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        self.push("slice_rows", Tensor::from_parts(vec![len, n], data), Op::SliceRows(x, start), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(x), rg)
    }

    /// Sum of a list of scalars (or equally shaped tensors).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or(Error::EmptyInput("add_all"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Column-wise maximum over rows: `[m x n] -> [1 x n]`. Ties go to the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape2(x);
        let t = self.value(x);
        let mut arg = vec![0usize; n];
        let mut best = t.row_slice(0).to_vec();
        for r in 1..m {
            for (c, &v) in t.row_slice(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        self.push("max_rows", Tensor::from_parts(vec![1, n], best), Op::MaxRows(x, arg), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = super::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push("log_softmax", t, Op::LogSoftmax(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    /// Weighted sum of selected entries: `sum_i w_i * x[r_i, c_i]`.
    pub fn gather_sum(&mut self, x: Var, picks: Vec<(usize, usize, f64)>) -> Result<Var> {
        let (m, n) = self.shape2(x);
        let t = self.value(x);
        let mut s = 0.0;
        for &(r, c, w) in &picks {
            if r >= m || c >= n {
                return Err(Error::Index {
                    what: "gather_sum",
                    index: r * n + c,
                    size: m * n,
                });
            }
            s += w * t.get(r, c);
        }
        let rg = self.rg(x);
        self.push("gather_sum", Tensor::from_parts(vec![1, 1], vec![s]), Op::Gather(x, picks), rg)
    }

    /// Linear-chain CRF negative log-likelihood of `tags`.
    ///
    /// `emissions` is `[L x T]`, `transitions[i][j]` scores tag `i` followed by tag `j`.
    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, tags: &[usize]) -> Result<Var> {
        let e = self.value(emissions);
        let a = self.value(transitions);
        let nll = crf::nll(e, a, tags)?;
        let (unary, pairwise) = crf::marginal_gradients(e, a, tags)?;
        let rg = self.rg(emissions) || self.rg(transitions);
        self.push(
            "crf_nll",
            Tensor::from_parts(vec![1, 1], vec![nll]),
            Op::Crf {
                emissions,
                transitions,
                unary,
                pairwise,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every parameter it reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::with_len(self.store.len());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if let Op::Param(id) = node.op {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} (entry {pos})",
                        self.store.name(id)
                    )));
                }
                let shape = self.store.get(id).shape().to_vec();
                out.set(id, Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).cols();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    matmul_nt_acc(g, self.value(*b).data(), ga, m, k, n);
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(*a, g, 1.0, grads);
                self.acc_scaled(*b, g, 1.0, grads);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(*a, g, 1.0, grads);
                self.acc_scaled(*b, g, -1.0, grads);
            }
            Op::AddRow(a, row) => {
                self.acc_scaled(*a, g, 1.0, grads);
                let n = out.cols();
                if let Some(gr) = self.grad_buf(*row, grads) {
                    for chunk in g.chunks(n) {
                        for (x, y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Affine(x, s) => self.acc_scaled(*x, g, *s, grads),
            Op::Sigmoid(x) => self.acc_map(*x, g, out.data(), grads, |y| y * (1.0 - y)),
            Op::Tanh(x) => self.acc_map(*x, g, out.data(), grads, |y| 1.0 - y * y),
            Op::Exp(x) => self.acc_map(*x, g, out.data(), grads, |y| y),
            Op::ConcatCols(parts) => {
                let (m, n) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.grad_buf(p, grads) {
                        for r in 0..m {
                            let src = &g[r * n + offset..r * n + offset + w];
                            for (x, y) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, len) = (out.rows(), out.cols());
                let n = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for r in 0..m {
                        for c in 0..len {
                            gx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    if let Some(gp) = self.grad_buf(p, grads) {
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + numel]) {
                            *x += y;
                        }
                    }
                    offset += numel;
                }
            }
            Op::SliceRows(x, start) => {
                let n = out.cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for (x, y) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for v in gx.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::MaxRows(x, arg) => {
                let n = out.cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for (c, &r) in arg.iter().enumerate() {
                        gx[r * n + c] += g[c];
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for ((gx_row, g_row), y_row) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = g_row.iter().sum();
                        for ((x, gi), yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for ((gx_row, g_row), y_row) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for ((x, gi), yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *x += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Gather(x, picks) => {
                let n = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for &(r, c, w) in picks {
                        gx[r * n + c] += w * g[0];
                    }
                }
            }
            Op::Crf {
                emissions,
                transitions,
                unary,
                pairwise,
            } => {
                self.acc_scaled(*emissions, unary, g[0], grads);
                self.acc_scaled(*transitions, pairwise, g[0], grads);
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let numel = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice())
    }

    fn acc_scaled(&self, v: Var, g: &[f64], s: f64, grads: &mut [Option<Vec<f64>>]) {
        if let Some(buf) = self.grad_buf(v, grads) {
            for (x, y) in buf.iter_mut().zip(g) {
                *x += s * y;
            }
        }
    }

    fn acc_map(&self, v: Var, g: &[f64], y: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64) -> f64) {
        if let Some(buf) = self.grad_buf(v, grads) {
            for ((x, gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                *x += gi * d(yi);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
