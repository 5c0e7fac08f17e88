//! Chain speculative decoding with a one-layer draft head that reads the
//! target's last-layer hidden states, and the greedy autoregressive oracle.
//!
//! Cache convention for both decoders: after prefill the target cache holds
//! every committed position except the last one, whose input row is fed at
//! the start of the next forward. Each iteration is one target forward.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::LanguageModel;
use crate::nn::graph::layer_graph;
use crate::nn::ops::{self, AttnOptions};
use crate::nn::params::{init_layer, keyed_rng, seeded_tensor};
use crate::nn::{Adam, AdamConfig, Binder, DecoderLayer, Graph, KVCache, Meter, ParamSet, Tensor};

pub const DRAFT_ROLE: &str = "draft.";
const DRAFT_LAYER: &str = "draft.layer.";
pub const MAX_DRAFT_LEN: usize = 8;

pub fn draft_init(d_model: usize, d_ff: usize, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(
        format!("{DRAFT_ROLE}fusion_w"),
        seeded_tensor(seed, DRAFT_ROLE, "fusion_w", &[2 * d_model, d_model], (1.0 / (2 * d_model) as f32).sqrt()),
    );
    p.insert(format!("{DRAFT_ROLE}fusion_b"), Tensor::zeros(&[d_model]));
    init_layer(&mut p, seed, DRAFT_ROLE, "layer.", d_model, d_ff);
    p
}

/// Fusion projection plus one decoder layer; embedding and LM head are
/// borrowed from the target.
#[derive(Debug, Clone)]
pub struct Draft {
    fusion_w: Tensor,
    fusion_b: Tensor,
    layer: DecoderLayer,
}

impl Draft {
    pub fn from_params(params: &ParamSet, n_heads: usize) -> Result<Self> {
        Ok(Self {
            fusion_w: params.get(&format!("{DRAFT_ROLE}fusion_w"))?.clone(),
            fusion_b: params.get(&format!("{DRAFT_ROLE}fusion_b"))?.clone(),
            layer: DecoderLayer::from_params(params, DRAFT_LAYER, n_heads)?,
        })
    }

    pub fn new_cache(&self, max_seq: usize) -> KVCache {
        KVCache::new(1, self.layer.d_model, max_seq)
    }

    /// Draft hidden states for input rows `x` paired with the previous
    /// positions' hidden states `prev`; appends to `cache`.
    pub fn forward(&self, x: &Tensor, prev: &Tensor, cache: &mut KVCache, meter: &Meter) -> Result<Tensor> {
        cache.check_room(x.rows())?;
        let fused = ops::linear(&Tensor::hstack(x, prev)?, &self.fusion_w, Some(&self.fusion_b), meter)?;
        Ok(self.layer.forward(&fused, Some(cache.layer_mut(0)), AttnOptions::causal(), meter)?.0)
    }
}

/// One draft position: logits over the vocabulary and the draft hidden.
pub fn draft_step(
    draft: &Draft,
    target: &LanguageModel,
    prev_hidden: &[f32],
    next_token: u32,
    cache: &mut KVCache,
    meter: &Meter,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let x = target.embed_tokens(&[next_token])?;
    let prev = Tensor::from_rows(1, prev_hidden.len(), prev_hidden.to_vec());
    step_rows(draft, target, &x, &prev, cache, meter)
}

fn step_rows(
    draft: &Draft,
    target: &LanguageModel,
    x: &Tensor,
    prev: &Tensor,
    cache: &mut KVCache,
    meter: &Meter,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let h = draft.forward(x, prev, cache, meter)?;
    let logits = target.logits(&h, meter)?;
    Ok((logits.into_data(), h.into_data()))
}

/// Greedy chain of `d` candidates. `first_input` is the input row of the
/// position after the draft cache; `context_hidden` the target hidden of the
/// position before it.
pub fn propose_chain(
    draft: &Draft,
    target: &LanguageModel,
    first_input: &Tensor,
    context_hidden: &[f32],
    d: usize,
    cache: &mut KVCache,
    meter: &Meter,
) -> Result<Vec<u32>> {
    if d == 0 {
        return Err(Error::InvalidArgument("draft length must be at least 1".into()));
    }
    let width = context_hidden.len();
    let mut prev = Tensor::from_rows(1, width, context_hidden.to_vec());
    let mut x = first_input.clone();
    let mut out = Vec::with_capacity(d);
    for _ in 0..d {
        let (logits, h) = step_rows(draft, target, &x, &prev, cache, meter)?;
        let tok = ops::greedy_argmax(&logits) as u32;
        out.push(tok);
        prev = Tensor::from_rows(1, width, h);
        x = target.embed_tokens(&[tok])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecStepResult {
    pub proposed: Vec<u32>,
    pub accepted_len: usize,
    /// Accepted candidates followed by the bonus token.
    pub emitted: Vec<u32>,
    pub cache_len_after: usize,
}

/// Runs the target once over `[last_input, candidates...]`, keeps the
/// longest prefix of candidates matching its greedy choices and truncates
/// the target cache to the committed length. Also returns the target hidden
/// rows of that forward.
pub fn verify(
    candidates: &[u32],
    last_input: &Tensor,
    target: &LanguageModel,
    cache: &mut KVCache,
    meter: &Meter,
) -> Result<(SpecStepResult, Tensor)> {
    let base = cache.len();
    let x = if candidates.is_empty() {
        last_input.clone()
    } else {
        Tensor::vstack(&[last_input, &target.embed_tokens(candidates)?])?
    };
    let h = target.forward_embeds(&x, cache, meter)?;
    let greedy = target.greedy(&h, meter)?;
    let accepted_len = candidates.iter().zip(&greedy).take_while(|(c, g)| c == g).count();
    let mut emitted = candidates[..accepted_len].to_vec();
    emitted.push(greedy[accepted_len]);
    cache.truncate(base + accepted_len + 1);
    Ok((
        SpecStepResult {
            proposed: candidates.to_vec(),
            accepted_len,
            emitted,
            cache_len_after: cache.len(),
        },
        h,
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub total_generated: usize,
    pub iterations: usize,
    /// `hist[a]` counts iterations that accepted `a` draft tokens.
    pub accepted_hist: Vec<usize>,
    pub mean_accepted_per_iter: f64,
}

impl DecodeStats {
    fn record(&mut self, accepted: usize, emitted: usize) {
        if self.accepted_hist.len() <= accepted {
            self.accepted_hist.resize(accepted + 1, 0);
        }
        self.accepted_hist[accepted] += 1;
        self.iterations += 1;
        self.total_generated += emitted;
    }

    fn finish(&mut self) {
        self.mean_accepted_per_iter = if self.iterations == 0 {
            0.0
        } else {
            self.total_generated as f64 / self.iterations as f64
        };
    }
}

#[derive(Debug, Default)]
pub struct DecodeMeters {
    pub prefill: Meter,
    pub decode: Meter,
    pub draft: Meter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
    /// Wall-clock seconds spent in the prefill forward.
    pub prefill_seconds: f64,
}

/// Prefills all prompt rows but the last; returns the cache, the hidden
/// rows of the prefilled positions and the held-back final input row.
fn prefill(target: &LanguageModel, prompt: &Tensor, meter: &Meter) -> Result<(KVCache, Option<Tensor>, Tensor)> {
    let m = prompt.rows();
    if prompt.rank() != 2 || m == 0 {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut cache = target.new_cache();
    let hidden = if m > 1 {
        let head = prompt.gather_rows(&(0..m - 1).collect::<Vec<_>>());
        Some(target.forward_embeds(&head, &mut cache, meter)?)
    } else {
        None
    };
    Ok((cache, hidden, prompt.gather_rows(&[m - 1])))
}

/// Appends `emitted`, cutting after the first `eos` and at `max_new` total
/// tokens. Returns how many were appended and whether decoding is done.
fn commit(out: &mut Vec<u32>, emitted: &[u32], max_new: usize, eos: Option<u32>) -> (usize, bool) {
    let start = out.len();
    for &t in emitted {
        if out.len() == max_new {
            break;
        }
        out.push(t);
        if Some(t) == eos {
            return (out.len() - start, true);
        }
    }
    (out.len() - start, out.len() == max_new)
}

/// One-token-per-forward greedy decoding from prompt embeddings.
pub fn decode_autoregressive(
    target: &LanguageModel,
    prompt: &Tensor,
    max_new: usize,
    eos: Option<u32>,
    meters: &DecodeMeters,
) -> Result<DecodeOutput> {
    let mut out = Vec::new();
    let mut stats = DecodeStats::default();
    if max_new == 0 {
        return Ok(DecodeOutput { tokens: out, stats, prefill_seconds: 0.0 });
    }
    let t0 = Instant::now();
    let (mut cache, _, mut last) = prefill(target, prompt, &meters.prefill)?;
    let prefill_seconds = t0.elapsed().as_secs_f64();
    loop {
        let h = target.forward_embeds(&last, &mut cache, &meters.decode)?;
        let t = target.greedy(&h, &meters.decode)?[0];
        stats.record(0, 1);
        if commit(&mut out, &[t], max_new, eos).1 {
            break;
        }
        last = target.embed_tokens(&[t])?;
    }
    stats.finish();
    Ok(DecodeOutput { tokens: out, stats, prefill_seconds })
}

/// Draft-then-verify decoding. Emits exactly the tokens of
/// [`decode_autoregressive`] for any draft parameters and any `d >= 1`.
pub fn decode_speculative(
    target: &LanguageModel,
    draft: &Draft,
    prompt: &Tensor,
    d: usize,
    max_new: usize,
    eos: Option<u32>,
    meters: &DecodeMeters,
) -> Result<DecodeOutput> {
    if !(1..=MAX_DRAFT_LEN).contains(&d) {
        return Err(Error::InvalidArgument(format!("draft length {d} outside 1..={MAX_DRAFT_LEN}")));
    }
    let mut out = Vec::new();
    let mut stats = DecodeStats::default();
    if max_new == 0 {
        return Ok(DecodeOutput { tokens: out, stats, prefill_seconds: 0.0 });
    }
    let width = target.d_model();
    let t0 = Instant::now();
    let (mut cache, hidden, mut last) = prefill(target, prompt, &meters.prefill)?;
    let prefill_seconds = t0.elapsed().as_secs_f64();
    let max_seq = target.config().max_seq;
    let mut dcache = draft.new_cache(max_seq);
    let mut ctx = vec![0.0f32; width];
    if let Some(h) = &hidden {
        // Draft inputs for prefilled positions: row i with target hidden i-1.
        let rows = h.rows();
        let x = prompt.gather_rows(&(0..rows).collect::<Vec<_>>());
        let mut prev = Tensor::zeros(&[rows, width]);
        for i in 1..rows {
            prev.row_mut(i).copy_from_slice(h.row(i - 1));
        }
        draft.forward(&x, &prev, &mut dcache, &meters.draft)?;
        ctx = h.row(rows - 1).to_vec();
    }
    loop {
        let pos = cache.len();
        let room = max_seq.saturating_sub(pos + 1);
        let remaining = max_new - out.len();
        let d_eff = d.min(room).min(remaining - 1);
        let candidates = if d_eff > 0 {
            let c = propose_chain(draft, target, &last, &ctx, d_eff, &mut dcache, &meters.draft)?;
            dcache.truncate(pos);
            c
        } else {
            Vec::new()
        };
        let (step, h) = verify(&candidates, &last, target, &mut cache, &meters.decode)?;
        let (n, done) = commit(&mut out, &step.emitted, max_new, eos);
        // An eos inside the accepted run ends the sequence early; the
        // histogram records what was actually committed.
        stats.record(n - 1, n);
        if done {
            break;
        }
        // Re-run the draft over the committed positions with true hiddens.
        let a = step.accepted_len;
        let mut x = last.clone();
        if a > 0 {
            x = Tensor::vstack(&[&x, &target.embed_tokens(&candidates[..a])?])?;
        }
        let mut prev = Tensor::zeros(&[a + 1, width]);
        prev.row_mut(0).copy_from_slice(&ctx);
        for i in 1..=a {
            prev.row_mut(i).copy_from_slice(h.row(i - 1));
        }
        draft.forward(&x, &prev, &mut dcache, &meters.draft)?;
        ctx = h.row(a).to_vec();
        last = target.embed_tokens(&step.emitted[a..])?;
    }
    stats.finish();
    Ok(DecodeOutput { tokens: out, stats, prefill_seconds })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f32,
    /// Weight of the hidden-state regression term.
    pub lambda: f32,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 2e-3, lambda: 0.5, seed: 0 }
    }
}

/// Teacher data for one prompt: its tokens followed by the target's greedy
/// continuation, with the target's hidden rows and greedy next tokens.
#[derive(Debug, Clone)]
pub struct DistillSequence {
    pub inputs: Tensor,
    pub hidden: Tensor,
    pub next: Vec<usize>,
}

pub fn teacher_sequence(target: &LanguageModel, prompt: &[u32], max_new: usize, eos: Option<u32>) -> Result<DistillSequence> {
    let x = target.embed_tokens(prompt)?;
    let gen = decode_autoregressive(target, &x, max_new, eos, &DecodeMeters::default())?;
    let mut ids = prompt.to_vec();
    ids.extend(&gen.tokens);
    let inputs = target.embed_tokens(&ids)?;
    let mut cache = target.new_cache();
    let hidden = target.forward_embeds(&inputs, &mut cache, &Meter::new())?;
    let next = target.greedy(&hidden, &Meter::new())?.into_iter().map(|t| t as usize).collect();
    Ok(DistillSequence { inputs, hidden, next })
}

/// Trains the draft against a frozen target: cross-entropy to the target's
/// greedy next token plus `lambda` times the MSE to the target hidden.
pub fn distill_draft(
    target: &LanguageModel,
    target_params: &ParamSet,
    draft_params: &mut ParamSet,
    n_heads: usize,
    sequences: &[DistillSequence],
    dc: &DistillConfig,
    mut log: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let role = target.role().to_string();
    let mut rng = keyed_rng(dc.seed, "draft.train.", "order");
    let mut opt = Adam::new(AdamConfig::with_lr(dc.lr));
    let mut losses = Vec::with_capacity(dc.steps);
    let frozen = ParamSet::from_iter(
        [format!("{role}ln_f.g"), format!("{role}ln_f.b"), format!("{role}lm_head")]
            .into_iter()
            .map(|n| target_params.get(&n).map(|t| (n.clone(), t.clone())))
            .collect::<Result<Vec<_>>>()?,
    );
    for step in 0..dc.steps {
        let seq = &sequences[rng.gen_range(0..sequences.len())];
        let n = seq.inputs.rows();
        let width = seq.hidden.cols();
        let mut prev = Tensor::zeros(&[n, width]);
        for i in 1..n {
            prev.row_mut(i).copy_from_slice(seq.hidden.row(i - 1));
        }
        let mut g = Graph::new();
        let mut all = draft_params.clone();
        all.extend(frozen.clone());
        let b = Binder::bind(&mut g, &all, |name| name.starts_with(DRAFT_ROLE));
        let x = g.leaf(Tensor::hstack(&seq.inputs, &prev)?);
        let f = g.linear(x, b.var(&format!("{DRAFT_ROLE}fusion_w"))?, Some(b.var(&format!("{DRAFT_ROLE}fusion_b"))?))?;
        let h = layer_graph(&mut g, &b, DRAFT_LAYER, f, n_heads, true, None)?;
        let hn = g.layer_norm(h, b.var(&format!("{role}ln_f.g"))?, b.var(&format!("{role}ln_f.b"))?)?;
        let logits = g.matmul(hn, b.var(&format!("{role}lm_head"))?)?;
        let ce = g.cross_entropy(logits, &seq.next)?;
        let mse = g.mse(h, &seq.hidden)?;
        let reg = g.scale(mse, dc.lambda);
        let loss = g.sum(&[ce, reg]);
        let value = g.scalar(loss);
        losses.push(value);
        let grads = g.backward(loss);
        opt.step(draft_params, &b.collect(&g, &grads))?;
        log(step, value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LLM_ROLE;
    use crate::nn::{seeded_init, ModelConfig};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, vocab_size: 10, max_seq: 48, seed }
    }

    fn target(seed: u64) -> (LanguageModel, ParamSet) {
        let p = seeded_init(&cfg(seed), LLM_ROLE).unwrap();
        (LanguageModel::from_params(&cfg(seed), &p, LLM_ROLE).unwrap(), p)
    }

    fn draft(seed: u64) -> Draft {
        Draft::from_params(&draft_init(16, 32, seed), 2).unwrap()
    }

    fn prompt(t: &LanguageModel, seed: u64, len: usize) -> Tensor {
        let mut rng = keyed_rng(seed, "prompt.", "ids");
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..10)).collect();
        t.embed_tokens(&ids).unwrap()
    }

    /// Uncached oracle: recompute the whole sequence every step.
    fn greedy_uncached(t: &LanguageModel, prompt: &Tensor, max_new: usize) -> Vec<u32> {
        let mut x = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let h = t.forward_embeds(&x, &mut t.new_cache(), &Meter::new()).unwrap();
            let tok = t.greedy(&h.gather_rows(&[h.rows() - 1]), &Meter::new()).unwrap()[0];
            out.push(tok);
            x = Tensor::vstack(&[&x, &t.embed_tokens(&[tok]).unwrap()]).unwrap();
        }
        out
    }

    #[test]
    fn autoregressive_matches_uncached_and_stops_at_eos() {
        let (t, _) = target(1);
        let x = prompt(&t, 3, 6);
        let out = decode_autoregressive(&t, &x, 12, None, &DecodeMeters::default()).unwrap();
        assert_eq!(out.tokens, greedy_uncached(&t, &x, 12));
        assert_eq!(out.stats.iterations, 12);
        let eos = out.tokens[4];
        let cut = decode_autoregressive(&t, &x, 12, Some(eos), &DecodeMeters::default()).unwrap();
        let first = out.tokens.iter().position(|&x| x == eos).unwrap();
        assert_eq!(cut.tokens, out.tokens[..=first]);
    }

    #[test]
    fn draft_step_shapes_purity_and_zeroed_fusion() {
        let (t, _) = target(2);
        let dr = draft(5);
        let prev = vec![0.3f32; 16];
        let a = draft_step(&dr, &t, &prev, 4, &mut dr.new_cache(8), &Meter::new()).unwrap();
        let b = draft_step(&dr, &t, &prev, 4, &mut dr.new_cache(8), &Meter::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 10);

        let mut p = draft_init(16, 32, 5);
        *p.get_mut("draft.fusion_w").unwrap() = Tensor::zeros(&[32, 16]);
        let dr = Draft::from_params(&p, 2).unwrap();
        let (logits, h) = draft_step(&dr, &t, &prev, 4, &mut dr.new_cache(8), &Meter::new()).unwrap();
        // Zero input: LN gives b = 0, attention mixes zeros, MLP gives w2 · gelu(b1) + b2 = 0.
        let layer = DecoderLayer::from_params(&p, DRAFT_LAYER, 2).unwrap();
        let (want_h, _) = layer.forward(&Tensor::zeros(&[1, 16]), None, AttnOptions::causal(), &Meter::new()).unwrap();
        assert_eq!(h, want_h.data());
        assert!(h.iter().all(|&v| v == 0.0));
        assert_eq!(logits, t.logits(&want_h, &Meter::new()).unwrap().into_data());
    }

    #[test]
    fn chains_are_replayable() {
        let (t, _) = target(2);
        let dr = draft(6);
        let x = t.embed_tokens(&[3]).unwrap();
        let run = |d| propose_chain(&dr, &t, &x, &[0.1; 16], d, &mut dr.new_cache(16), &Meter::new()).unwrap();
        assert_eq!(run(1).len(), 1);
        let four = run(4);
        assert_eq!(four.len(), 4);
        assert!(four.iter().all(|&c| c < 10));
        assert_eq!(four, run(4));
        assert_eq!(four[0], run(1)[0]);
    }

    #[test]
    fn self_agreeing_candidates_are_all_accepted() {
        let (t, _) = target(4);
        let x = prompt(&t, 9, 5);
        let want = decode_autoregressive(&t, &x, 6, None, &DecodeMeters::default()).unwrap().tokens;
        let head = x.gather_rows(&[0, 1, 2, 3]);
        let mut cache = t.new_cache();
        t.forward_embeds(&head, &mut cache, &Meter::new()).unwrap();
        let (step, _) = verify(&want[..4], &x.gather_rows(&[4]), &t, &mut cache, &Meter::new()).unwrap();
        assert_eq!(step.accepted_len, 4);
        assert_eq!(step.emitted, want[..5]);
        assert_eq!(step.cache_len_after, 9);

        // Cache after verify equals a fresh forward over the committed tokens.
        let committed = Tensor::vstack(&[&x, &t.embed_tokens(&want[..4]).unwrap()]).unwrap();
        let mut fresh = t.new_cache();
        t.forward_embeds(&committed, &mut fresh, &Meter::new()).unwrap();
        assert_eq!(cache, fresh);
    }

    #[test]
    fn max_new_one_is_one_iteration() {
        let (t, _) = target(3);
        let x = prompt(&t, 1, 4);
        let out = decode_speculative(&t, &draft(1), &x, 4, 1, None, &DecodeMeters::default()).unwrap();
        assert_eq!(out.tokens.len(), 1);
        assert_eq!(out.stats.iterations, 1);
        assert!(decode_speculative(&t, &draft(1), &x, 0, 4, None, &DecodeMeters::default()).is_err());
        assert!(decode_speculative(&t, &draft(1), &x, 9, 4, None, &DecodeMeters::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn speculative_equals_autoregressive(
            seed in 0u64..1000,
            len in 1usize..8,
            d in 1usize..=8,
            max_new in 1usize..30,
            use_eos in any::<bool>(),
        ) {
            let (t, _) = target(seed % 7);
            let dr = draft(seed);
            let x = prompt(&t, seed, len);
            let eos = use_eos.then_some(3);
            let ar = decode_autoregressive(&t, &x, max_new, eos, &DecodeMeters::default()).unwrap();
            let sp = decode_speculative(&t, &dr, &x, d, max_new, eos, &DecodeMeters::default()).unwrap();
            prop_assert_eq!(&sp.tokens, &ar.tokens);
            let s = &sp.stats;
            prop_assert!(s.iterations >= 1 && s.iterations <= s.total_generated.max(1));
            let weighted: usize = s.accepted_hist.iter().enumerate().map(|(a, &c)| c * (a + 1)).sum();
            prop_assert_eq!(weighted, sp.tokens.len());
            prop_assert_eq!(s.total_generated, sp.tokens.len());
            prop_assert!(s.mean_accepted_per_iter >= 1.0);
        }
    }

    #[test]
    fn decoding_near_max_seq_clamps_draft_length() {
        let (t, _) = target(5);
        let x = prompt(&t, 2, 40);
        let ar = decode_autoregressive(&t, &x, 8, None, &DecodeMeters::default()).unwrap();
        let sp = decode_speculative(&t, &draft(2), &x, 8, 8, None, &DecodeMeters::default()).unwrap();
        assert_eq!(sp.tokens, ar.tokens);
        assert!(decode_autoregressive(&t, &x, 10, None, &DecodeMeters::default()).is_err());
    }

    #[test]
    fn distillation_reduces_loss_and_leaves_target_alone() {
        let (t, tp) = target(8);
        let before = tp.checksum();
        let seqs: Vec<_> = (0..8u32)
            .map(|i| teacher_sequence(&t, &[i % 10, (i * 3) % 10, 2], 10, None).unwrap())
            .collect();
        let mut dp = draft_init(16, 32, 0);
        let dc = DistillConfig { steps: 200, lr: 5e-3, lambda: 0.5, seed: 1 };
        let losses = distill_draft(&t, &tp, &mut dp, 2, &seqs, &dc, |_, _| {}).unwrap();
        let head: f32 = losses[..10].iter().sum();
        let tail: f32 = losses[losses.len() - 10..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(tp.checksum(), before);
        assert!(distill_draft(&t, &tp, &mut dp, 2, &[], &dc, |_, _| {}).is_err());
    }
}
