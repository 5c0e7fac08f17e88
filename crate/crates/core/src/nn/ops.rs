//! Pure f32 kernels. Every output row is computed independently with a fixed
//! accumulation order, so batching rows never changes results bitwise.

use super::meter::Meter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;

/// `a [m,k] · b [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor, meter: &Meter) -> Result<Tensor> {
    if a.rank() != 2 && a.rank() != 1 || b.rank() != 2 {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0f32; m * n];
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    meter.add((m * k * n) as u64);
    Ok(Tensor::from_rows(m, n, out))
}

/// `x · w + bias` with `bias` broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, meter: &Meter) -> Result<Tensor> {
    let mut y = matmul(x, w, meter)?;
    if let Some(b) = bias {
        if b.len() != y.cols() {
            return Err(Error::Shape(format!("bias {} vs width {}", b.len(), y.cols())));
        }
        for r in 0..y.rows() {
            for (o, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(y)
}

pub fn layer_norm_row(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * g[i] + b[i];
    }
}

pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if g.len() != c || b.len() != c {
        return Err(Error::Shape(format!("layer_norm gain {} vs width {c}", g.len())));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), g.data(), b.data(), out.row_mut(r));
    }
    Ok(out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place max-subtracted softmax of one slice.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Softmax along `axis` of a tensor of any rank.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} for rank {}",
            shape.len()
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if len == 0 {
        return Err(Error::InvalidArgument("softmax over empty axis".into()));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[idx(j)];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[idx(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// Smallest index achieving the maximum.
pub fn greedy_argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Which attention weights to hand back to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    None,
    /// `[n_heads, n_q, n_k]`.
    All,
    /// `[n_heads, n_k]` for the final query row.
    LastRow,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnOptions<'a> {
    pub causal: bool,
    /// `false` entries are never attended to.
    pub key_mask: Option<&'a [bool]>,
    pub capture: Capture,
}

impl<'a> AttnOptions<'a> {
    pub fn causal() -> Self {
        Self {
            causal: true,
            key_mask: None,
            capture: Capture::None,
        }
    }

    pub fn full() -> Self {
        Self {
            causal: false,
            key_mask: None,
            capture: Capture::None,
        }
    }

    pub fn capture(mut self, c: Capture) -> Self {
        self.capture = c;
        self
    }

    pub fn mask(mut self, m: &'a [bool]) -> Self {
        self.key_mask = Some(m);
        self
    }
}

/// Scaled dot-product attention over `n_heads` heads.
///
/// `q` is `[n_q, d]`, `k`/`v` are `[n_k, d]` (raw slices, row-major). With
/// `causal`, query `i` sits at absolute position `n_k - n_q + i` and only sees
/// keys up to that position. Masked keys are skipped, not zero-weighted, so
/// the multiply-add count is `2 · d · Σ visited keys`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    n_heads: usize,
    opts: AttnOptions<'_>,
    meter: &Meter,
) -> Result<(Tensor, Option<Tensor>)> {
    if d == 0 || n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!("width {d} not divisible by {n_heads} heads")));
    }
    if !q.len().is_multiple_of(d) || !k.len().is_multiple_of(d) || k.len() != v.len() || q.is_empty() || k.is_empty() {
        return Err(Error::Shape(format!(
            "attention q {} k {} v {} width {d}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let n_q = q.len() / d;
    let n_k = k.len() / d;
    if opts.causal && n_q > n_k {
        return Err(Error::Shape(format!("causal attention with {n_q} queries > {n_k} keys")));
    }
    if let Some(m) = opts.key_mask {
        if m.len() != n_k {
            return Err(Error::Shape(format!("key mask {} vs {n_k} keys", m.len())));
        }
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let offset = n_k - n_q.min(n_k);
    let mut out = vec![0.0f32; n_q * d];
    let mut captured = match opts.capture {
        Capture::None => None,
        Capture::All => Some(vec![0.0f32; n_heads * n_q * n_k]),
        Capture::LastRow => Some(vec![0.0f32; n_heads * n_k]),
    };
    let mut scores = vec![0.0f32; n_k];
    let mut idx: Vec<usize> = Vec::with_capacity(n_k);
    let mut visited: u64 = 0;
    for i in 0..n_q {
        let limit = if opts.causal { offset + i + 1 } else { n_k };
        idx.clear();
        idx.extend((0..limit).filter(|&j| opts.key_mask.is_none_or(|m| m[j])));
        visited += idx.len() as u64;
        if idx.is_empty() {
            continue;
        }
        for h in 0..n_heads {
            let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for (s, &j) in scores.iter_mut().zip(&idx) {
                let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
                let mut acc = 0.0f32;
                for c in 0..dh {
                    acc += qh[c] * kh[c];
                }
                *s = acc * scale;
            }
            let w = &mut scores[..idx.len()];
            softmax_in_place(w);
            let oh = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (&wj, &j) in w.iter().zip(&idx) {
                let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    oh[c] += wj * vh[c];
                }
            }
            match (&mut captured, opts.capture) {
                (Some(buf), Capture::All) => {
                    let base = (h * n_q + i) * n_k;
                    for (&wj, &j) in w.iter().zip(&idx) {
                        buf[base + j] = wj;
                    }
                }
                (Some(buf), Capture::LastRow) if i == n_q - 1 => {
                    for (&wj, &j) in w.iter().zip(&idx) {
                        buf[h * n_k + j] = wj;
                    }
                }
                _ => {}
            }
        }
    }
    meter.add(2 * visited * d as u64);
    let weights = captured.map(|buf| match opts.capture {
        Capture::All => Tensor::new(vec![n_heads, n_q, n_k], buf).expect("sized"),
        _ => Tensor::new(vec![n_heads, n_k], buf).expect("sized"),
    });
    Ok((Tensor::from_rows(n_q, d, out), weights))
}

/// Attention returning the full `[n_heads, n_q, n_k]` weight tensor.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    causal: bool,
    meter: &Meter,
) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() || k.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let opts = AttnOptions {
        causal,
        key_mask: None,
        capture: Capture::All,
    };
    let (out, w) = attend(q.data(), k.data(), v.data(), q.cols(), n_heads, opts, meter)?;
    Ok((out, w.expect("captured")))
}
