//! Tape-based reverse-mode differentiation over row-major 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameter
//! leaves borrow their values from a [`ParamStore`]; [`Graph::backward`]
//! walks the tape in reverse and returns a [`Gradients`] set indexed by
//! [`ParamId`]. Gradients are only propagated into nodes that transitively
//! depend on a parameter.

use super::array::gemm;
use super::params::{Fnv, Gradients, ParamId, ParamStore, EMPTY_STORE};
use super::Array;
use crate::error::{LadError, Result};

const LN_EPS: f64 = 1e-5;

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    RepeatRows(Var, usize),
    GroupMean(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogitsSum(Var, Vec<f64>),
    CrossEntropySum(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Option<Array>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::detached()
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    /// Graph without parameters, for pure array computations.
    pub fn detached() -> Graph<'static> {
        Graph::new(&EMPTY_STORE)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.0 < self.store.len(), "parameter id out of range");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant node; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `[.., k] x [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(LadError::dim("matmul", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Array::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(LadError::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(LadError::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Array::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Array {
        let xv = self.value(x);
        Array::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.map(x, |v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(xv.cols()) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(LadError::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Array::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` has `groups * nq` rows, `k` and `v` have `groups * nk` rows; rows of
    /// group `g` in `q` attend only to rows of group `g` in `k`/`v`. The model
    /// dimension is split into `heads` contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dm = qv.cols();
        if kv.cols() != dm || vv.cols() != dm || kv.rows() != vv.rows() {
            return Err(LadError::dim("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(LadError::Config(format!(
                "model dimension {dm} is not divisible by {heads} heads"
            )));
        }
        if groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0 || kv.rows() < groups {
            return Err(LadError::dim("attention groups", qv.shape(), kv.shape()));
        }
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        let dh = dm / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut out = vec![0.0; qv.rows() * dm];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qi = &qd[(g * nq + i) * dm + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(g * nk + j) * dm + off..][..dh];
                        *s = dot(qi, kj) * inv;
                    }
                    softmax_in_place(&mut scores);
                    let pbase = ((g * heads + h) * nq + i) * nk;
                    probs[pbase..pbase + nk].copy_from_slice(&scores);
                    let oi = &mut out[(g * nq + i) * dm + off..][..dh];
                    for (j, p) in scores.iter().enumerate() {
                        let vj = &vd[(g * nk + j) * dm + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Array::from_parts(qv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Repeats each row `times` consecutively: `[b, c] -> [b * times, c]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len() * times);
        for r in 0..xv.rows() {
            for _ in 0..times {
                out.extend_from_slice(xv.row(r));
            }
        }
        let out = Array::from_parts(vec![xv.rows() * times, c], out);
        self.push(out, Op::RepeatRows(x, times), &[x])
    }

    /// Mean over consecutive blocks of `group` rows: `[b * group, c] -> [b, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(LadError::dim("group_mean", xv.shape(), &[group]));
        }
        let c = xv.cols();
        let b = xv.rows() / group;
        let mut out = vec![0.0; b * c];
        for r in 0..xv.rows() {
            let dst = &mut out[(r / group) * c..][..c];
            for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let out = Array::from_parts(vec![b, c], out);
        Ok(self.push(out, Op::GroupMean(x, group), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(LadError::dim("concat_cols", self.shape(parts[0]), pv.shape()));
            }
            cols += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::from_parts(vec![rows, cols], out);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(LadError::dim("slice_cols", xv.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Array::from_parts(vec![xv.rows(), end - start], out);
        Ok(self.push(out, Op::SliceCols(x, start, end), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(LadError::dim("gather_rows", xv.shape(), &[rows.len()]));
        }
        let mut out = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let out = Array::from_parts(vec![rows.len(), xv.cols()], out);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Array::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of binary cross-entropy terms between `sigmoid(logits)` and targets.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(LadError::dim("bce", lv.shape(), &[targets.len()]));
        }
        let s = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_with_logits(z, t))
            .sum();
        Ok(self.push(Array::scalar(s), Op::BceWithLogitsSum(logits, targets.to_vec()), &[logits]))
    }

    /// Sum over rows of `-log softmax(row)[label]`, evaluated with log-sum-exp.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || labels.iter().any(|&l| l >= lv.cols()) {
            return Err(LadError::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let s = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -log_softmax_at(lv.row(r), l))
            .sum();
        Ok(self.push(Array::scalar(s), Op::CrossEntropySum(logits, labels.to_vec()), &[logits]))
    }

    /// Hash of the active side of every piecewise-linear node (ReLU and
    /// absolute value). Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::Abs(x) => x,
                _ => continue,
            };
            let mut byte = 0u8;
            for (i, v) in self.value(x).data().iter().enumerate() {
                byte = (byte << 1) | u8::from(*v > 0.0);
                if i % 8 == 7 {
                    h.write(&[byte]);
                    byte = 0;
                }
            }
            h.write(&[byte, 0xff]);
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(LadError::dim("backward", lv.shape(), &[1]));
        }
        if !lv.item().is_finite() {
            return Err(LadError::Numeric(format!("loss = {}", lv.item())));
        }
        let mut grads = Gradients::with_len(self.store.len());
        let mut adj: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn acc(&self, adj: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(a) => a.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, adj: &mut [Option<Array>], v: Var, f: impl FnOnce(&Array) -> Array) {
        if self.needs(v) {
            let g = f(self.value(v));
            self.acc(adj, v, g);
        }
    }

    fn propagate(&self, i: usize, dy: &Array, adj: &mut [Option<Array>], grads: &mut Gradients) {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => grads.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, bv.data(), true, &mut da, 0.0);
                    self.acc(adj, *a, Array::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, dy.data(), false, &mut db, 0.0);
                    self.acc(adj, *b, Array::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(adj, *x, dy.clone());
                self.acc_with(adj, *b, |bv| {
                    let mut db = vec![0.0; bv.len()];
                    for row in dy.data().chunks(bv.len()) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    Array::from_parts(bv.shape().to_vec(), db)
                });
            }
            Op::Add(a, b) => {
                self.acc_with(adj, *a, |av| reshape_like(dy, av));
                self.acc_with(adj, *b, |bv| reshape_like(dy, bv));
            }
            Op::Sub(a, b) => {
                self.acc_with(adj, *a, |av| reshape_like(dy, av));
                self.acc_with(adj, *b, |bv| {
                    let g = dy.data().iter().map(|v| -v).collect();
                    Array::from_parts(bv.shape().to_vec(), g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(adj, *a, |_| zip_like(av, dy, bv, |g, o| g * o));
                self.acc_with(adj, *b, |_| zip_like(bv, dy, av, |g, o| g * o));
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.acc_with(adj, *x, |xv| {
                    Array::from_parts(xv.shape().to_vec(), dy.data().iter().map(|g| g * f).collect())
                });
            }
            Op::Relu(x) => {
                self.acc_with(adj, *x, |xv| {
                    zip_like(xv, dy, xv, |g, v| if v > 0.0 { g } else { 0.0 })
                });
            }
            Op::Abs(x) => {
                self.acc_with(adj, *x, |xv| {
                    zip_like(xv, dy, xv, |g, v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Sigmoid(x) => {
                let yv = y.unwrap();
                self.acc_with(adj, *x, |xv| zip_like(xv, dy, yv, |g, s| g * s * (1.0 - s)));
            }
            Op::SoftmaxRows(x) => {
                let yv = y.unwrap();
                self.acc_with(adj, *x, |xv| {
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for ((d, yr), gr) in dx.chunks_mut(c).zip(yv.data().chunks(c)).zip(dy.data().chunks(c)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                self.acc_with(adj, *gain, |g| {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in dy.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    Array::from_parts(g.shape().to_vec(), dg)
                });
                self.acc_with(adj, *bias, |b| {
                    let mut db = vec![0.0; c];
                    for gr in dy.data().chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    Array::from_parts(b.shape().to_vec(), db)
                });
                self.acc_with(adj, *x, |_| {
                    let mut dx = vec![0.0; xv.len()];
                    let mut dxh = vec![0.0; c];
                    for r in 0..xv.rows() {
                        let gr = &dy.data()[r * c..][..c];
                        let hr = &xhat[r * c..][..c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gv.data()[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dxh[j] - m1 - hr[j] * m2);
                        }
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => self.attention_backward(dy, (*q, *k, *v), *groups, *heads, probs, adj),
            Op::RepeatRows(x, times) => {
                let times = *times;
                self.acc_with(adj, *x, |xv| {
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (r, gr) in dy.data().chunks(c).enumerate() {
                        let dst = &mut dx[(r / times) * c..][..c];
                        for (d, g) in dst.iter_mut().zip(gr) {
                            *d += g;
                        }
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::GroupMean(x, group) => {
                let group = *group;
                self.acc_with(adj, *x, |xv| {
                    let mut dx = Vec::with_capacity(xv.len());
                    for r in 0..xv.rows() {
                        dx.extend(dy.row(r / group).iter().map(|g| g / group as f64));
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.acc_with(adj, p, |pv| {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            dp.extend_from_slice(&dy.row(r)[start..start + pc]);
                        }
                        Array::from_parts(pv.shape().to_vec(), dp)
                    });
                    start += pc;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (start, end) = (*start, *end);
                self.acc_with(adj, *x, |xv| {
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        dx[r * c + start..r * c + end].copy_from_slice(dy.row(r));
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::GatherRows(x, rows) => {
                self.acc_with(adj, *x, |xv| {
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, g) in dx[r * c..][..c].iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    Array::from_parts(xv.shape().to_vec(), dx)
                });
            }
            Op::Sum(x) => {
                let g = dy.item();
                self.acc_with(adj, *x, |xv| Array::full(xv.shape(), g));
            }
            Op::Mean(x) => {
                let g = dy.item();
                self.acc_with(adj, *x, |xv| Array::full(xv.shape(), g / xv.len() as f64));
            }
            Op::BceWithLogitsSum(x, targets) => {
                let g = dy.item();
                self.acc_with(adj, *x, |xv| {
                    let d = xv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| g * (sigmoid(z) - t))
                        .collect();
                    Array::from_parts(xv.shape().to_vec(), d)
                });
            }
            Op::CrossEntropySum(x, labels) => {
                let g = dy.item();
                self.acc_with(adj, *x, |xv| {
                    let c = xv.cols();
                    let mut d = xv.data().to_vec();
                    for (r, row) in d.chunks_mut(c).enumerate() {
                        softmax_in_place(row);
                        row[labels[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= g);
                    }
                    Array::from_parts(xv.shape().to_vec(), d)
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Array,
        (q, k, v): (Var, Var, Var),
        groups: usize,
        heads: usize,
        probs: &[f64],
        adj: &mut [Option<Array>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dm = qv.cols();
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        let dh = dm / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), dy.data());
        let mut ds = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let pbase = ((g * heads + h) * nq + i) * nk;
                    let p = &probs[pbase..pbase + nk];
                    let gi = &gd[(g * nq + i) * dm + off..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..nk {
                        let row = (g * nk + j) * dm + off;
                        let dp = dot(gi, &vd[row..row + dh]);
                        ds[j] = dp;
                        weighted += p[j] * dp;
                        for (d, x) in dv[row..row + dh].iter_mut().zip(gi) {
                            *d += p[j] * x;
                        }
                    }
                    let qrow = (g * nq + i) * dm + off;
                    for j in 0..nk {
                        let s = p[j] * (ds[j] - weighted) * inv;
                        if s == 0.0 {
                            continue;
                        }
                        let krow = (g * nk + j) * dm + off;
                        for t in 0..dh {
                            dq[qrow + t] += s * kd[krow + t];
                            dk[krow + t] += s * qd[qrow + t];
                        }
                    }
                }
            }
        }
        let shape = |a: &Array| a.shape().to_vec();
        self.acc(adj, q, Array::from_parts(shape(qv), dq));
        self.acc(adj, k, Array::from_parts(shape(kv), dk));
        self.acc(adj, v, Array::from_parts(shape(vv), dv));
    }
}

fn reshape_like(g: &Array, like: &Array) -> Array {
    Array::from_parts(like.shape().to_vec(), g.data().to_vec())
}

fn zip_like(like: &Array, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Array::from_parts(like.shape().to_vec(), data)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}
