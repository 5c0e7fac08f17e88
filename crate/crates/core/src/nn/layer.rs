//! Pre-norm transformer layer (attention then GELU MLP) and its KV cache.

use super::meter::Meter;
use super::ops::{self, AttnOptions, Capture};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cached keys and values of one layer, stored `[len, n_heads · d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvLayer {
    k: Vec<f32>,
    v: Vec<f32>,
    d_model: usize,
}

impl KvLayer {
    pub fn new(d_model: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn keys(&self) -> &[f32] {
        &self.k
    }

    pub fn values(&self) -> &[f32] {
        &self.v
    }

    fn truncate(&mut self, n: usize) {
        self.k.truncate(n * self.d_model);
        self.v.truncate(n * self.d_model);
    }
}

/// Per-layer KV cache of a transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<KvLayer>,
    max_seq: usize,
}

impl KVCache {
    pub fn new(n_layers: usize, d_model: usize, max_seq: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| KvLayer::new(d_model)).collect(),
            max_seq,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvLayer::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn layer(&self, i: usize) -> &KvLayer {
        &self.layers[i]
    }

    /// Drops every position at index `n` and beyond.
    pub fn truncate(&mut self, n: usize) {
        for l in &mut self.layers {
            l.truncate(n);
        }
    }

    pub fn check_room(&self, new: usize) -> Result<()> {
        if new == 0 {
            return Err(Error::InvalidArgument("zero-length input".into()));
        }
        if self.len() + new > self.max_seq {
            return Err(Error::CacheOverflow {
                cached: self.len(),
                new,
                max_seq: self.max_seq,
            });
        }
        Ok(())
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut KvLayer {
        &mut self.layers[i]
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Names of the tensors making up one layer, relative to the layer prefix.
pub const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2",
];

impl DecoderLayer {
    /// Loads `{prefix}wq`, `{prefix}ln1.g`, ... from `params`.
    pub fn from_params(params: &ParamSet, prefix: &str, n_heads: usize) -> Result<Self> {
        let get = |n: &str| params.get(&format!("{prefix}{n}")).cloned();
        let wq = get("wq")?;
        let d_model = wq.cols();
        let w1 = get("w1")?;
        let d_ff = w1.cols();
        if d_model % n_heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} vs {n_heads} heads")));
        }
        Ok(Self {
            n_heads,
            d_model,
            d_ff,
            ln1_g: get("ln1.g")?,
            ln1_b: get("ln1.b")?,
            wq,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            ln2_g: get("ln2.g")?,
            ln2_b: get("ln2.b")?,
            w1,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    /// Runs the layer over the rows of `x`.
    ///
    /// With a cache, `x` holds only new positions; their keys and values are
    /// appended and attention covers the cached prefix as well.
    pub fn forward(
        &self,
        x: &Tensor,
        cache: Option<&mut KvLayer>,
        opts: AttnOptions<'_>,
        meter: &Meter,
    ) -> Result<(Tensor, Option<Tensor>)> {
        if x.rank() != 2 || x.cols() != self.d_model {
            return Err(Error::Shape(format!(
                "layer input {:?}, expected [len, {}]",
                x.shape(),
                self.d_model
            )));
        }
        let h = ops::layer_norm(x, &self.ln1_g, &self.ln1_b)?;
        let q = ops::matmul(&h, &self.wq, meter)?;
        let k = ops::matmul(&h, &self.wk, meter)?;
        let v = ops::matmul(&h, &self.wv, meter)?;
        let (ctx, weights) = match cache {
            Some(kv) => {
                kv.k.extend_from_slice(k.data());
                kv.v.extend_from_slice(v.data());
                ops::attend(q.data(), &kv.k, &kv.v, self.d_model, self.n_heads, opts, meter)?
            }
            None => ops::attend(q.data(), k.data(), v.data(), self.d_model, self.n_heads, opts, meter)?,
        };
        let mut x1 = ops::matmul(&ctx, &self.wo, meter)?;
        x1.add_assign(x)?;
        let h2 = ops::layer_norm(&x1, &self.ln2_g, &self.ln2_b)?;
        let f = ops::gelu(&ops::linear(&h2, &self.w1, Some(&self.b1), meter)?);
        let mut out = ops::linear(&f, &self.w2, Some(&self.b2), meter)?;
        out.add_assign(&x1)?;
        Ok((out, weights))
    }

    /// Keys and the final-row query of the attention sub-block, without
    /// running the rest of the layer. Used to read last-position attention
    /// cheaply over long sequences.
    pub fn last_row_attention(&self, x: &Tensor, meter: &Meter) -> Result<Tensor> {
        let h = ops::layer_norm(x, &self.ln1_g, &self.ln1_b)?;
        let last = h.gather_rows(&[h.rows() - 1]);
        let q = ops::matmul(&last, &self.wq, meter)?;
        let k = ops::matmul(&h, &self.wk, meter)?;
        let (_, w) = ops::attend(
            q.data(),
            k.data(),
            k.data(),
            self.d_model,
            self.n_heads,
            AttnOptions::full().capture(Capture::LastRow),
            &Meter::new(),
        )?;
        Ok(w.expect("captured"))
    }
}

/// One layer forward with optional KV cache; `cache` must have exactly one layer.
///
/// Fails if cached plus new positions would exceed the cache's `max_seq`.
pub fn decoder_layer_forward(
    x: &Tensor,
    layer: &DecoderLayer,
    cache: Option<&mut KVCache>,
    meter: &Meter,
) -> Result<(Tensor, Tensor)> {
    let opts = AttnOptions::causal().capture(Capture::All);
    let (h, w) = match cache {
        Some(c) => {
            c.check_room(x.rows())?;
            layer.forward(x, Some(c.layer_mut(0)), opts, meter)?
        }
        None => layer.forward(x, None, opts, meter)?,
    };
    Ok((h, w.expect("captured")))
}

/// Multiply-adds of one layer processing `n` new rows whose query `i`
/// visits `visited(i)` keys in total across rows: `4·n·d² + 2·d·visits + 2·n·d·d_ff`.
pub fn layer_madds(n: u64, visits: u64, d: u64, d_ff: u64) -> u64 {
    4 * n * d * d + 2 * d * visits + 2 * n * d * d_ff
}
