//! Decoder-only language model: the text half of the VLM and the target of
//! speculative decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::layer_graph;
use crate::nn::layer::layer_madds;
use crate::nn::ops::{self, AttnOptions};
use crate::nn::params::keyed_rng;
use crate::nn::{Adam, AdamConfig, Binder, DecoderLayer, Graph, KVCache, Meter, ModelConfig, ParamSet, Tensor};

pub const LLM_ROLE: &str = "llm.";

#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: ModelConfig,
    role: String,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<DecoderLayer>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    lm_head: Tensor,
}

impl LanguageModel {
    pub fn from_params(config: &ModelConfig, params: &ParamSet, role: &str) -> Result<Self> {
        config.validate()?;
        let get = |n: &str| params.get(&format!("{role}{n}")).cloned();
        let layers = (0..config.n_layers)
            .map(|i| DecoderLayer::from_params(params, &format!("{role}layer{i}."), config.n_heads))
            .collect::<Result<Vec<_>>>()?;
        let tok_emb = get("tok_emb")?;
        if tok_emb.shape() != [config.vocab_size, config.d_model] {
            return Err(Error::Config(format!(
                "{role}tok_emb has shape {:?}, config wants [{}, {}]",
                tok_emb.shape(),
                config.vocab_size,
                config.d_model
            )));
        }
        Ok(Self {
            config: *config,
            role: role.to_string(),
            tok_emb,
            pos_emb: get("pos_emb")?,
            layers,
            ln_f_g: get("ln_f.g")?,
            ln_f_b: get("ln_f.b")?,
            lm_head: get("lm_head")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn first_layer(&self) -> &DecoderLayer {
        &self.layers[0]
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.config.n_layers, self.config.d_model, self.config.max_seq)
    }

    /// Token embeddings without positions, `[len, d_model]`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let rows = ids
            .iter()
            .map(|&i| {
                let i = i as usize;
                if i < self.config.vocab_size {
                    Ok(i)
                } else {
                    Err(Error::TokenOutOfVocab { id: i, vocab: self.config.vocab_size })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.tok_emb.gather_rows(&rows))
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.tok_emb
    }

    /// Adds learned positions `start..start + len` to `x`.
    pub fn with_positions(&self, x: &Tensor, start: usize) -> Result<Tensor> {
        if start + x.rows() > self.config.max_seq {
            return Err(Error::CacheOverflow {
                cached: start,
                new: x.rows(),
                max_seq: self.config.max_seq,
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, p) in out.row_mut(r).iter_mut().zip(self.pos_emb.row(start + r)) {
                *o += p;
            }
        }
        Ok(out)
    }

    /// Runs new positions through every layer, appending to `cache`.
    ///
    /// `x` holds input embeddings without positions. Returns the last layer's
    /// residual-stream output (before the final norm), `[len, d_model]`.
    pub fn forward_embeds(&self, x: &Tensor, cache: &mut KVCache, meter: &Meter) -> Result<Tensor> {
        cache.check_room(x.rows())?;
        let mut h = self.with_positions(x, cache.len())?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, Some(cache.layer_mut(i)), AttnOptions::causal(), meter)?.0;
        }
        Ok(h)
    }

    pub fn forward_tokens(&self, ids: &[u32], cache: &mut KVCache, meter: &Meter) -> Result<Tensor> {
        let x = self.embed_tokens(ids)?;
        self.forward_embeds(&x, cache, meter)
    }

    /// Final norm and LM head over the rows of `hidden`.
    pub fn logits(&self, hidden: &Tensor, meter: &Meter) -> Result<Tensor> {
        let h = ops::layer_norm(hidden, &self.ln_f_g, &self.ln_f_b)?;
        ops::matmul(&h, &self.lm_head, meter)
    }

    /// Greedy next token after each row of `hidden`.
    pub fn greedy(&self, hidden: &Tensor, meter: &Meter) -> Result<Vec<u32>> {
        let logits = self.logits(hidden, meter)?;
        Ok((0..logits.rows())
            .map(|r| ops::greedy_argmax(logits.row(r)) as u32)
            .collect())
    }

    /// Closed-form multiply-adds of a prefill over `n` fresh positions
    /// (layers only).
    pub fn prefill_madds(&self, n: u64) -> u64 {
        let c = &self.config;
        c.n_layers as u64 * layer_madds(n, n * (n + 1) / 2, c.d_model as u64, c.d_ff as u64)
    }

    /// Closed-form multiply-adds of one decode step against `n_ctx` keys,
    /// LM head included.
    pub fn decode_step_madds(&self, n_ctx: u64) -> u64 {
        let c = &self.config;
        c.n_layers as u64 * layer_madds(1, n_ctx, c.d_model as u64, c.d_ff as u64)
            + (c.d_model * c.vocab_size) as u64
    }
}

/// Prompt and expected continuation for language-model fine-tuning.
#[derive(Debug, Clone)]
pub struct LmExample {
    pub prompt: Vec<u32>,
    pub continuation: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

/// Teacher-forced cross-entropy on the continuation tokens, Adam over every
/// `role` parameter. Returns the per-step mean loss.
pub fn train_language_model(
    config: &ModelConfig,
    params: &mut ParamSet,
    role: &str,
    examples: &[LmExample],
    tc: &LmTrainConfig,
) -> Result<Vec<f32>> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    use rand::Rng;
    let mut rng = keyed_rng(tc.seed, "lmtrain.", "order");
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr));
    let mut losses = Vec::with_capacity(tc.steps);
    for _ in 0..tc.steps {
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, params, |n| n.starts_with(role));
        let mut terms = Vec::new();
        for _ in 0..tc.batch.max(1) {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let mut seq: Vec<usize> = ex.prompt.iter().map(|&t| t as usize).collect();
            seq.extend(ex.continuation.iter().map(|&t| t as usize));
            let n = seq.len();
            if n > config.max_seq {
                return Err(Error::CacheOverflow { cached: 0, new: n, max_seq: config.max_seq });
            }
            let tok = g.gather(b.var(&format!("{role}tok_emb"))?, &seq[..n - 1])?;
            let positions: Vec<usize> = (0..n - 1).collect();
            let pos = g.gather(b.var(&format!("{role}pos_emb"))?, &positions)?;
            let mut h = g.add(tok, pos)?;
            for i in 0..config.n_layers {
                h = layer_graph(&mut g, &b, &format!("{role}layer{i}."), h, config.n_heads, true, None)?;
            }
            let first = ex.prompt.len() - 1;
            let rows: Vec<usize> = (first..n - 1).collect();
            let h = g.rows(h, &rows)?;
            let h = g.layer_norm(h, b.var(&format!("{role}ln_f.g"))?, b.var(&format!("{role}ln_f.b"))?)?;
            let logits = g.matmul(h, b.var(&format!("{role}lm_head"))?)?;
            let targets: Vec<usize> = seq[first + 1..].to_vec();
            terms.push(g.cross_entropy(logits, &targets)?);
        }
        let total = g.sum(&terms);
        let loss = g.scale(total, 1.0 / terms.len() as f32);
        losses.push(g.scalar(loss));
        let grads = g.backward(loss);
        opt.step(params, &b.collect(&g, &grads))?;
    }
    Ok(losses)
}
