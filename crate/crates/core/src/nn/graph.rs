//! Reverse-mode differentiation tape over 2-D tensors.
//!
//! The forward math mirrors the inference kernels in [`super::ops`]; the
//! training path and the inference path are kept separate so inference can
//! stream through KV caches without recording anything.

use std::collections::BTreeMap;

use super::ops::{gelu_grad_scalar, gelu_scalar, layer_norm_row, sigmoid, softmax_in_place, LN_EPS};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f32>, inv: Vec<f32> },
    Gelu(Var),
    Sigmoid(Var),
    Gather { table: Var, ids: Vec<usize> },
    HStack(Var, Var),
    Rows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<f32> },
    RowDot(Var, Var),
    Scale(Var, f32),
    Sum(Vec<Var>),
    BceWithLogits { logits: Var, targets: Vec<f32>, denom: f32 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Mse { a: Var, target: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(tb.rank() == 2 && ta.cols() == tb.shape()[0], || {
            format!("graph matmul {:?} x {:?}", ta.shape(), tb.shape())
        })?;
        let out = super::ops::matmul(ta, tb, &super::meter::Meter::new())?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        check(tb.len() == tx.cols(), || format!("bias {} vs {}", tb.len(), tx.cols()))?;
        let mut out = tx.clone();
        let bias = tb.data().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(g), self.value(b));
        check(tg.len() == c && tb.len() == c, || "layer_norm gain width".into())?;
        let mut out = tx.clone();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv = vec![0.0; tx.rows()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let n = c as f32;
            let mean = row.iter().sum::<f32>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let iv = 1.0 / (var + LN_EPS).sqrt();
            inv[r] = iv;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * iv;
            }
            layer_norm_row(row, tg.data(), tb.data(), out.row_mut(r));
        }
        Ok(self.push(out, Op::LayerNorm { x, g, b, xhat, inv }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    /// Rows `ids` of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::TokenOutOfVocab { id: bad, vocab: t.rows() });
        }
        check(!ids.is_empty(), || "gather of no rows".into())?;
        let out = t.gather_rows(ids);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check(!rows.is_empty() && rows.iter().all(|&r| r < t.rows()), || {
            format!("row selection out of range for {:?}", t.shape())
        })?;
        let out = t.gather_rows(rows);
        Ok(self.push(out, Op::Rows { x, rows: rows.to_vec() }))
    }

    pub fn hstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::hstack(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::HStack(a, b)))
    }

    /// Multi-head attention; see [`super::ops::attend`] for mask semantics.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        check(tk.cols() == d && tk.shape() == tv.shape() && d % n_heads == 0, || {
            format!("graph attention {:?} {:?} {:?}", tq.shape(), tk.shape(), tv.shape())
        })?;
        let (n_q, n_k) = (tq.rows(), tk.rows());
        check(!causal || n_q <= n_k, || "causal with more queries than keys".into())?;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let offset = n_k - n_q.min(n_k);
        let mut probs = vec![0.0f32; n_heads * n_q * n_k];
        let mut out = vec![0.0f32; n_q * d];
        let mut buf = vec![0.0f32; n_k];
        for h in 0..n_heads {
            for i in 0..n_q {
                let limit = if causal { offset + i + 1 } else { n_k };
                let idx: Vec<usize> = (0..limit)
                    .filter(|&j| key_mask.is_none_or(|m| m[j]))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let qh = &tq.row(i)[h * dh..(h + 1) * dh];
                for (s, &j) in buf.iter_mut().zip(&idx) {
                    let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                    let mut acc = 0.0f32;
                    for c in 0..dh {
                        acc += qh[c] * kh[c];
                    }
                    *s = acc * scale;
                }
                let w = &mut buf[..idx.len()];
                softmax_in_place(w);
                let base = (h * n_q + i) * n_k;
                for (&wj, &j) in w.iter().zip(&idx) {
                    probs[base + j] = wj;
                    let vh = &tv.row(j)[h * dh..(h + 1) * dh];
                    for c in 0..dh {
                        out[i * d + h * dh + c] += wj * vh[c];
                    }
                }
            }
        }
        let out = Tensor::from_rows(n_q, d, out);
        Ok(self.push(out, Op::Attention { q, k, v, n_heads, probs }))
    }

    /// `out[i] = a[i] · b[i]`, shape `[m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.shape() == tb.shape(), || format!("row_dot {:?} {:?}", ta.shape(), tb.shape()))?;
        let out: Vec<f32> = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let m = out.len();
        Ok(self.push(Tensor::from_rows(m, 1, out), Op::RowDot(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total: f32 = xs.iter().map(|&x| self.value(x).data().iter().sum::<f32>()).sum();
        self.push(Tensor::vector(vec![total]), Op::Sum(xs.to_vec()))
    }

    /// Binary cross-entropy on logits against soft targets, summed over all
    /// elements and divided by `denom`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], denom: f32) -> Result<Var> {
        let z = self.value(logits);
        check(z.len() == targets.len(), || format!("bce {} vs {}", z.len(), targets.len()))?;
        let total: f32 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::vector(vec![total / denom]),
            Op::BceWithLogits { logits, targets: targets.to_vec(), denom },
        ))
    }

    /// Mean softmax cross-entropy of the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        check(z.rows() == targets.len(), || format!("ce rows {} vs {}", z.rows(), targets.len()))?;
        let mut probs = z.data().to_vec();
        let c = z.cols();
        let mut loss = 0.0f32;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::TokenOutOfVocab { id: t, vocab: c });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_in_place(row);
            loss -= row[t].max(1e-30).ln();
        }
        let m = targets.len() as f32;
        Ok(self.push(
            Tensor::vector(vec![loss / m]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        check(ta.len() == target.len(), || "mse size".into())?;
        let n = ta.len() as f32;
        let s: f32 = ta.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::vector(vec![s / n]), Op::Mse { a, target: target.data().to_vec() }))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f32])| {
            let n = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|g| {
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &tb.data()[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * brow[j];
                            }
                            g[i * k + kk] += s;
                        }
                    }
                });
                acc(*b, &|g| {
                    for i in 0..m {
                        let arow = ta.row(i);
                        let drow = &dy[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = arow[kk];
                            let grow = &mut g[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                grow[j] += a_ik * drow[j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::AddBias(x, b) => {
                acc(*x, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let c = self.value(*b).len();
                acc(*b, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % c] += d;
                    }
                });
            }
            Op::LayerNorm { x, g, b, xhat, inv } => {
                let tg = self.value(*g).data();
                let c = tg.len();
                let rows = inv.len();
                acc(*x, &|gx| {
                    for r in 0..rows {
                        let dyr = &dy[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dxh = dyr[j] * tg[j];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                        }
                        let n = c as f32;
                        for j in 0..c {
                            let dxh = dyr[j] * tg[j];
                            gx[r * c + j] += inv[r] / n * (n * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
                acc(*g, &|gg| {
                    for (i, d) in dy.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                });
                acc(*b, &|gb| {
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad_scalar(tx[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols();
                acc(*table, &|g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[id * c + j] += dy[r * c + j];
                        }
                    }
                });
            }
            Op::Rows { x, rows } => {
                let c = self.value(*x).cols();
                acc(*x, &|g| {
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += dy[r * c + j];
                        }
                    }
                });
            }
            Op::HStack(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = self.value(*a).rows();
                acc(*a, &|g| {
                    for r in 0..rows {
                        for j in 0..ca {
                            g[r * ca + j] += dy[r * (ca + cb) + j];
                        }
                    }
                });
                acc(*b, &|g| {
                    for r in 0..rows {
                        for j in 0..cb {
                            g[r * cb + j] += dy[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let (n_q, n_k) = (tq.rows(), tk.rows());
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0f32; n_q * d];
                let mut dk = vec![0.0f32; n_k * d];
                let mut dv = vec![0.0f32; n_k * d];
                let mut dp = vec![0.0f32; n_k];
                for h in 0..*n_heads {
                    for i in 0..n_q {
                        let p = &probs[(h * n_q + i) * n_k..(h * n_q + i + 1) * n_k];
                        let dyh = &dy[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut dot = 0.0f32;
                        for j in 0..n_k {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vh = &tv.row(j)[h * dh..(h + 1) * dh];
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += dyh[c] * vh[c];
                                dv[j * d + h * dh + c] += p[j] * dyh[c];
                            }
                            dp[j] = s;
                            dot += s * p[j];
                        }
                        let qh = &tq.row(i)[h * dh..(h + 1) * dh];
                        for j in 0..n_k {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                            for c in 0..dh {
                                dq[i * d + h * dh + c] += ds * kh[c];
                                dk[j * d + h * dh + c] += ds * qh[c];
                            }
                        }
                    }
                }
                acc(*q, &|g| g.iter_mut().zip(&dq).for_each(|(g, d)| *g += d));
                acc(*k, &|g| g.iter_mut().zip(&dk).for_each(|(g, d)| *g += d));
                acc(*v, &|g| g.iter_mut().zip(&dv).for_each(|(g, d)| *g += d));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                acc(*a, &|g| {
                    for (i, gv) in g.iter_mut().enumerate() {
                        *gv += dy[i / c] * tb.data()[i];
                    }
                });
                acc(*b, &|g| {
                    for (i, gv) in g.iter_mut().enumerate() {
                        *gv += dy[i / c] * ta.data()[i];
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s));
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(x, &|g| g.iter_mut().for_each(|g| *g += dy[0]));
                }
            }
            Op::BceWithLogits { logits, targets, denom } => {
                let z = self.value(*logits).data();
                acc(*logits, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[0] * (sigmoid(z[i]) - targets[i]) / denom;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let m = targets.len() as f32;
                acc(*logits, &|g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += dy[0] * (probs[r * c + j] - onehot) / m;
                        }
                    }
                });
            }
            Op::Mse { a, target } => {
                let ta = self.value(*a).data();
                let n = ta.len() as f32;
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[0] * 2.0 * (ta[i] - target[i]) / n;
                    }
                });
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

/// Maps named parameters onto graph leaves, tracking which are trainable.
pub struct Binder {
    vars: BTreeMap<String, Var>,
    trainable: BTreeMap<String, Var>,
}

impl Binder {
    /// Binds every tensor of `params`; names for which `train` returns true
    /// receive gradients in [`Binder::collect`].
    pub fn bind(g: &mut Graph, params: &ParamSet, train: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut trainable = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = g.leaf(t.clone());
            vars.insert(name.clone(), v);
            if train(name) {
                trainable.insert(name.clone(), v);
            }
        }
        Self { vars, trainable }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of trainable parameters, zero-filled where unreached.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> Vec<(String, Vec<f32>)> {
        self.trainable
            .iter()
            .map(|(name, &v)| {
                let grad = grads
                    .get(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Graph version of [`super::layer::DecoderLayer::forward`].
pub fn layer_graph(
    g: &mut Graph,
    p: &Binder,
    prefix: &str,
    x: Var,
    n_heads: usize,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let v = |n: &str| p.var(&format!("{prefix}{n}"));
    let h = g.layer_norm(x, v("ln1.g")?, v("ln1.b")?)?;
    let q = g.matmul(h, v("wq")?)?;
    let k = g.matmul(h, v("wk")?)?;
    let vv = g.matmul(h, v("wv")?)?;
    let ctx = g.attention(q, k, vv, n_heads, causal, key_mask)?;
    let o = g.matmul(ctx, v("wo")?)?;
    let x1 = g.add(o, x)?;
    let h2 = g.layer_norm(x1, v("ln2.g")?, v("ln2.b")?)?;
    let f = g.linear(h2, v("w1")?, Some(v("b1")?))?;
    let f = g.gelu(f);
    let f = g.linear(f, v("w2")?, Some(v("b2")?))?;
    g.add(f, x1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::DecoderLayer;
    use crate::nn::meter::Meter;
    use crate::nn::ops::AttnOptions;
    use crate::nn::params::{init_layer, seeded_tensor};

    /// Central finite differences of `f` with respect to every element of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f32) -> Vec<f32> {
        let eps = 1e-2f32;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                (f(&xp) - f(&xm)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(analytic: &[f32], numeric: &[f32]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let tol = 2e-2 * (1.0 + n.abs());
            assert!((a - n).abs() < tol, "analytic {a} vs numeric {n}");
        }
    }

    /// Builds a scalar from one free input and checks its gradient.
    fn check_grad(x0: Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().to_vec();
        let numeric = numeric_grad(&x0, &|t| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let l = build(&mut g, x);
            g.scalar(l)
        });
        assert_close(&analytic, &numeric);
    }

    fn probe(g: &mut Graph, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let w = g.leaf(seeded_tensor(99, "", "probe", &shape, 1.0));
        let d = g.row_dot(y, w).unwrap();
        let n = g.value(d).len();
        let t = vec![0.3; n];
        g.bce_with_logits(d, &t, 1.0).unwrap()
    }

    #[test]
    fn matmul_layernorm_gelu_grads() {
        let w0 = seeded_tensor(1, "", "w", &[4, 3], 1.0);
        check_grad(seeded_tensor(2, "", "x", &[2, 4], 1.0), &|g, x| {
            let w = g.leaf(w0.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            probe(g, y)
        });
        check_grad(seeded_tensor(3, "", "x", &[3, 5], 2.0), &|g, x| {
            let gg = g.leaf(seeded_tensor(4, "", "g", &[5], 1.0));
            let b = g.leaf(seeded_tensor(5, "", "b", &[5], 1.0));
            let y = g.layer_norm(x, gg, b).unwrap();
            probe(g, y)
        });
    }

    #[test]
    fn attention_grads() {
        let k0 = seeded_tensor(7, "", "k", &[4, 4], 1.0);
        for causal in [false, true] {
            check_grad(seeded_tensor(8, "", "q", &[3, 4], 1.0), &|g, q| {
                let k = g.leaf(k0.clone());
                let y = g.attention(q, k, k, 2, causal, None).unwrap();
                probe(g, y)
            });
            let q0 = seeded_tensor(8, "", "q", &[3, 4], 1.0);
            check_grad(k0.clone(), &|g, k| {
                let q = g.leaf(q0.clone());
                let y = g.attention(q, k, k, 2, causal, Some(&[true, false, true, true])).unwrap();
                probe(g, y)
            });
        }
    }

    #[test]
    fn loss_grads() {
        check_grad(seeded_tensor(9, "", "z", &[3, 5], 2.0), &|g, z| {
            g.cross_entropy(z, &[0, 4, 2]).unwrap()
        });
        let target = seeded_tensor(10, "", "t", &[3, 5], 1.0);
        check_grad(seeded_tensor(9, "", "z", &[3, 5], 2.0), &|g, z| g.mse(z, &target).unwrap());
        check_grad(seeded_tensor(11, "", "z", &[2, 3], 2.0), &|g, z| {
            let s = g.sigmoid(z);
            let a = g.hstack(s, z).unwrap();
            let r = g.rows(a, &[1, 1, 0]).unwrap();
            let r = g.scale(r, 0.5);
            probe(g, r)
        });
    }

    #[test]
    fn gather_and_bias_grads() {
        check_grad(seeded_tensor(12, "", "t", &[5, 3], 1.0), &|g, t| {
            let e = g.gather(t, &[4, 0, 4]).unwrap();
            let b = g.leaf(seeded_tensor(13, "", "b", &[3], 1.0));
            let y = g.add_bias(e, b).unwrap();
            probe(g, y)
        });
    }

    #[test]
    fn graph_layer_matches_inference_layer() {
        let mut p = ParamSet::new();
        init_layer(&mut p, 21, "m.", "l.", 8, 16);
        let x0 = seeded_tensor(22, "", "x", &[5, 8], 1.0);
        let inference = DecoderLayer::from_params(&p, "m.l.", 2).unwrap();
        let (want, _) = inference
            .forward(&x0, None, AttnOptions::causal(), &Meter::new())
            .unwrap();
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &p, |_| true);
        let x = g.leaf(x0);
        let y = layer_graph(&mut g, &b, "m.l.", x, 2, true, None).unwrap();
        for (a, w) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - w).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_param_grads_match_finite_differences() {
        let mut p = ParamSet::new();
        init_layer(&mut p, 23, "m.", "l.", 4, 8);
        let x0 = seeded_tensor(24, "", "x", &[3, 4], 1.0);
        let loss_of = |params: &ParamSet| -> (f32, Vec<(String, Vec<f32>)>) {
            let mut g = Graph::new();
            let b = Binder::bind(&mut g, params, |n| n.ends_with("wk") || n.ends_with("w1"));
            let x = g.leaf(x0.clone());
            let y = layer_graph(&mut g, &b, "m.l.", x, 2, true, None).unwrap();
            let l = probe(&mut g, y);
            let grads = g.backward(l);
            (g.scalar(l), b.collect(&g, &grads))
        };
        let (_, grads) = loss_of(&p);
        for (name, analytic) in grads {
            let base = p.get(&name).unwrap().clone();
            let numeric = numeric_grad(&base, &|t| {
                let mut q = p.clone();
                *q.get_mut(&name).unwrap() = t.clone();
                loss_of(&q).0
            });
            assert_close(&analytic, &numeric);
        }
    }
}
