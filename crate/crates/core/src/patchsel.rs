//! Query-conditioned view selection: a lexical phrase matcher fused with a
//! small text encoder whose six per-view latents cross-attend to the query.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tables::{phrase_table, tokenize, Vocab, PAD};
use crate::corpus::{QuerySample, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::nn::graph::layer_graph;
use crate::nn::ops::{self, AttnOptions};
use crate::nn::params::{init_layer, keyed_rng, seeded_tensor};
use crate::nn::{Adam, AdamConfig, Binder, DecoderLayer, Graph, Meter, ParamSet, Tensor, Var};
use crate::vision::composite::{slot_of, slot_view, PATCHES_PER_VIEW};
use crate::vision::{PatchMask, NUM_SLOTS};

pub const PATCHSEL_ROLE: &str = "patchsel.";
pub const SELECTOR_LAYERS: usize = 4;

/// Matches explicit view phrases, longest phrase first, left to right.
/// Returns per-view indicators and whether anything matched.
pub fn lexical_match(raw: &str) -> ([f32; NUM_VIEWS], bool) {
    let words = tokenize(raw);
    let mut phrases: Vec<(Vec<String>, &[usize])> = phrase_table()
        .phrases
        .iter()
        .map(|p| (tokenize(&p.phrase), p.views.as_slice()))
        .collect();
    phrases.sort_by_key(|p| std::cmp::Reverse(p.0.len()));
    let mut scores = [0.0f32; NUM_VIEWS];
    let mut explicit = false;
    let mut i = 0;
    while i < words.len() {
        match phrases.iter().find(|(p, _)| words[i..].starts_with(p)) {
            Some((p, views)) => {
                for &v in *views {
                    scores[v] = 1.0;
                }
                explicit = true;
                i += p.len();
            }
            None => i += 1,
        }
    }
    (scores, explicit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: Vocab::standard().len(),
            max_len: 32,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "selector d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 8 || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::Config("selector vocab_size >= 8, max_len and d_ff > 0".into()));
        }
        Ok(())
    }
}

pub fn selector_init(config: &SelectorConfig) -> Result<ParamSet> {
    config.validate()?;
    let (d, seed, r) = (config.d_model, config.seed, PATCHSEL_ROLE);
    let s = (1.0 / d as f32).sqrt();
    let t = |path: &str, shape: &[usize], scale: f32| seeded_tensor(seed, r, path, shape, scale);
    let mut p = ParamSet::new();
    p.insert(format!("{r}tok_emb"), t("tok_emb", &[config.vocab_size, d], 1.0));
    p.insert(format!("{r}pos_emb"), t("pos_emb", &[config.max_len, d], 0.1));
    for i in 0..SELECTOR_LAYERS {
        init_layer(&mut p, seed, r, &format!("layer{i}."), d, config.d_ff);
    }
    p.insert(format!("{r}ln_f.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{r}ln_f.b"), Tensor::zeros(&[d]));
    p.insert(format!("{r}latents"), t("latents", &[NUM_VIEWS, d], 1.0));
    for w in ["xq", "xk", "xv", "xo"] {
        p.insert(format!("{r}{w}"), t(w, &[d, d], s));
    }
    p.insert(format!("{r}head_w"), t("head_w", &[NUM_VIEWS, d], s));
    p.insert(format!("{r}head_b"), Tensor::zeros(&[NUM_VIEWS, 1]));
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct PatchSelector {
    config: SelectorConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<DecoderLayer>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    latents: Tensor,
    xq: Tensor,
    xk: Tensor,
    xv: Tensor,
    xo: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

impl PatchSelector {
    pub fn from_params(config: &SelectorConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let get = |n: &str| params.get(&format!("{PATCHSEL_ROLE}{n}")).cloned();
        let layers = (0..SELECTOR_LAYERS)
            .map(|i| DecoderLayer::from_params(params, &format!("{PATCHSEL_ROLE}layer{i}."), config.n_heads))
            .collect::<Result<Vec<_>>>()?;
        let latents = get("latents")?;
        if latents.shape() != [NUM_VIEWS, config.d_model] {
            return Err(Error::Config(format!("patchsel.latents has shape {:?}", latents.shape())));
        }
        Ok(Self {
            config: *config,
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            layers,
            ln_f_g: get("ln_f.g")?,
            ln_f_b: get("ln_f.b")?,
            latents,
            xq: get("xq")?,
            xk: get("xk")?,
            xv: get("xv")?,
            xo: get("xo")?,
            head_w: get("head_w")?,
            head_b: get("head_b")?,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    /// Six independent view logits for a tokenized query. `PAD` ids are
    /// masked out of every attention.
    pub fn encode_and_score(&self, ids: &[u32], meter: &Meter) -> Result<[f32; NUM_VIEWS]> {
        let (ids, mask) = self.check_ids(ids)?;
        let mut x = self.tok_emb.gather_rows(&ids);
        x.add_assign(&self.pos_emb.gather_rows(&(0..ids.len()).collect::<Vec<_>>()))?;
        for layer in &self.layers {
            x = layer.forward(&x, None, AttnOptions::full().mask(&mask), meter)?.0;
        }
        let enc = ops::layer_norm(&x, &self.ln_f_g, &self.ln_f_b)?;
        let q = ops::matmul(&self.latents, &self.xq, meter)?;
        let k = ops::matmul(&enc, &self.xk, meter)?;
        let v = ops::matmul(&enc, &self.xv, meter)?;
        let (ctx, _) = ops::attend(
            q.data(),
            k.data(),
            v.data(),
            self.config.d_model,
            self.config.n_heads,
            AttnOptions::full().mask(&mask),
            meter,
        )?;
        let mut out = ops::matmul(&ctx, &self.xo, meter)?;
        out.add_assign(&self.latents)?;
        let mut logits = [0.0f32; NUM_VIEWS];
        for (i, l) in logits.iter_mut().enumerate() {
            *l = out.row(i).iter().zip(self.head_w.row(i)).map(|(a, b)| a * b).sum::<f32>()
                + self.head_b.data()[i];
        }
        Ok(logits)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(Vec<usize>, Vec<bool>)> {
        check_query(&self.config, ids)
    }

    /// Scores a raw query and turns the scores into a patch mask.
    pub fn select(&self, raw: &str, policy: &SelectionPolicy) -> Result<(ViewScores, PatchMask)> {
        let ids = Vocab::standard().encode(raw);
        let logits = self.encode_and_score(&ids, &Meter::new())?;
        let scores = ViewScores::new(raw, logits, policy)?;
        let mask = select_patches(&scores.final_scores, policy.threshold, policy.granularity, None)?;
        Ok((scores, mask))
    }
}

fn check_query(config: &SelectorConfig, ids: &[u32]) -> Result<(Vec<usize>, Vec<bool>)> {
    if ids.is_empty() || ids.iter().all(|&i| i == PAD) {
        return Err(Error::InvalidArgument("empty query".into()));
    }
    if ids.len() > config.max_len {
        return Err(Error::InvalidArgument(format!(
            "query of {} tokens exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    let out = ids
        .iter()
        .map(|&i| {
            if (i as usize) < config.vocab_size {
                Ok(i as usize)
            } else {
                Err(Error::TokenOutOfVocab { id: i as usize, vocab: config.vocab_size })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = ids.iter().map(|&i| i != PAD).collect();
    Ok((out, mask))
}

/// Graph version of [`PatchSelector::encode_and_score`]; returns `[6, 1]`.
fn score_graph(g: &mut Graph, b: &Binder, config: &SelectorConfig, ids: &[u32]) -> Result<Var> {
    let (ids, mask) = check_query(config, ids)?;
    let r = PATCHSEL_ROLE;
    let v = |n: &str| b.var(&format!("{r}{n}"));
    let tok = g.gather(v("tok_emb")?, &ids)?;
    let pos = g.gather(v("pos_emb")?, &(0..ids.len()).collect::<Vec<_>>())?;
    let mut x = g.add(tok, pos)?;
    for i in 0..SELECTOR_LAYERS {
        x = layer_graph(g, b, &format!("{r}layer{i}."), x, config.n_heads, false, Some(&mask))?;
    }
    let enc = g.layer_norm(x, v("ln_f.g")?, v("ln_f.b")?)?;
    let lat = v("latents")?;
    let q = g.matmul(lat, v("xq")?)?;
    let k = g.matmul(enc, v("xk")?)?;
    let vv = g.matmul(enc, v("xv")?)?;
    let ctx = g.attention(q, k, vv, config.n_heads, false, Some(&mask))?;
    let o = g.matmul(ctx, v("xo")?)?;
    let out = g.add(o, lat)?;
    let dots = g.row_dot(out, v("head_w")?)?;
    g.add(dots, v("head_b")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    View,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub threshold: f32,
    pub w_lex: f32,
    pub w_model: f32,
    pub granularity: Granularity,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { threshold: 0.5, w_lex: 0.6, w_model: 0.4, granularity: Granularity::Patch }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.w_lex < 0.0 || self.w_model < 0.0 || (self.w_lex + self.w_model - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "w_lex {} and w_model {} must be nonnegative and sum to 1",
                self.w_lex, self.w_model
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub lexical: [f32; NUM_VIEWS],
    pub explicit: bool,
    pub model_prob: [f32; NUM_VIEWS],
    pub final_scores: [f32; NUM_VIEWS],
}

impl ViewScores {
    pub fn new(raw: &str, logits: [f32; NUM_VIEWS], policy: &SelectionPolicy) -> Result<Self> {
        policy.validate()?;
        let (lexical, explicit) = lexical_match(raw);
        let final_scores = combine_scores(&lexical, explicit, &logits, policy.w_lex, policy.w_model);
        Ok(Self { lexical, explicit, model_prob: logits.map(ops::sigmoid), final_scores })
    }
}

/// Lexical/model fusion: a weighted sum when the query names a view,
/// otherwise the model probabilities alone.
pub fn combine_scores(
    lexical: &[f32; NUM_VIEWS],
    explicit: bool,
    logits: &[f32; NUM_VIEWS],
    w_lex: f32,
    w_model: f32,
) -> [f32; NUM_VIEWS] {
    let mut out = [0.0f32; NUM_VIEWS];
    for i in 0..NUM_VIEWS {
        let p = ops::sigmoid(logits[i]);
        out[i] = if explicit { w_lex * lexical[i] + w_model * p } else { p };
    }
    out
}

/// Thresholds view (or per-patch) scores into a mask, falling back to the
/// best view's two patches when nothing clears the threshold.
pub fn select_patches(
    final_scores: &[f32; NUM_VIEWS],
    threshold: f32,
    granularity: Granularity,
    per_patch: Option<&[f32; NUM_SLOTS]>,
) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1)")));
    }
    let mut bits = [false; NUM_SLOTS];
    for (slot, bit) in bits.iter_mut().enumerate() {
        let (view, _) = slot_view(slot);
        let score = match (granularity, per_patch) {
            (Granularity::Patch, Some(p)) => p[slot],
            _ => final_scores[view],
        };
        *bit = score >= threshold;
    }
    let fallback = !bits.iter().any(|&b| b);
    if fallback {
        let best = ops::greedy_argmax(final_scores);
        for p in 0..PATCHES_PER_VIEW {
            bits[slot_of(best, p)] = true;
        }
    }
    Ok(PatchMask { bits, threshold, fallback })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectorTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, batch: 8, seed: 0, eval_every: 0 }
    }
}

/// One JSON-lines record of selector training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorLog {
    pub step: usize,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<[f32; NUM_VIEWS]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorEval {
    pub per_view_f1: [f32; NUM_VIEWS],
    pub macro_f1: f32,
    /// Macro-F1 restricted to explicit-template samples.
    pub explicit_macro_f1: f32,
    /// Macro-F1 of thresholded model probabilities alone, without the
    /// lexical fusion.
    pub model_only_macro_f1: f32,
    pub samples: usize,
}

/// Binary F1 per view; a view with no positives and no predictions scores 1.
pub fn per_view_f1(pred: &[[bool; NUM_VIEWS]], truth: &[[bool; NUM_VIEWS]]) -> [f32; NUM_VIEWS] {
    let mut out = [0.0f32; NUM_VIEWS];
    for (v, o) in out.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for (p, t) in pred.iter().zip(truth) {
            match (p[v], t[v]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        *o = if tp + fp + fneg == 0 { 1.0 } else { 2.0 * tp as f32 / (2 * tp + fp + fneg) as f32 };
    }
    out
}

fn macro_f1(f: &[f32; NUM_VIEWS]) -> f32 {
    f.iter().sum::<f32>() / NUM_VIEWS as f32
}

pub fn evaluate_selector(
    selector: &PatchSelector,
    samples: &[QuerySample],
    policy: &SelectionPolicy,
) -> Result<SelectorEval> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut pred = Vec::with_capacity(samples.len());
    let mut model_pred = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        let ids = Vocab::standard().encode(&s.raw);
        let logits = selector.encode_and_score(&ids, &Meter::new())?;
        let scores = ViewScores::new(&s.raw, logits, policy)?;
        pred.push(scores.final_scores.map(|x| x >= policy.threshold));
        model_pred.push(scores.model_prob.map(|x| x >= policy.threshold));
        truth.push(s.view_labels);
    }
    let f = per_view_f1(&pred, &truth);
    let explicit: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].explicit).collect();
    let explicit_macro_f1 = if explicit.is_empty() {
        1.0
    } else {
        let p: Vec<_> = explicit.iter().map(|&i| pred[i]).collect();
        let t: Vec<_> = explicit.iter().map(|&i| truth[i]).collect();
        macro_f1(&per_view_f1(&p, &t))
    };
    Ok(SelectorEval {
        per_view_f1: f,
        macro_f1: macro_f1(&f),
        explicit_macro_f1,
        model_only_macro_f1: macro_f1(&per_view_f1(&model_pred, &truth)),
        samples: samples.len(),
    })
}

/// Adam on the summed per-view BCE, averaged over the batch. Only
/// `patchsel.` parameters change. Emits one log record per step.
pub fn train_patch_selector(
    config: &SelectorConfig,
    params: &mut ParamSet,
    train: &[QuerySample],
    val: &[QuerySample],
    tc: &SelectorTrainConfig,
    policy: &SelectionPolicy,
    mut log: impl FnMut(&SelectorLog),
) -> Result<Vec<f32>> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let encoded: Vec<Vec<u32>> = train.iter().map(|s| Vocab::standard().encode(&s.raw)).collect();
    let mut rng = keyed_rng(tc.seed, "patchsel.train.", "order");
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr));
    let batch = tc.batch.max(1);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, params, |n| n.starts_with(PATCHSEL_ROLE));
        let mut terms = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..train.len());
            let logits = score_graph(&mut g, &b, config, &encoded[i])?;
            terms.push(g.bce_with_logits(logits, &train[i].labels_f32(), batch as f32)?);
        }
        let loss = g.sum(&terms);
        let value = g.scalar(loss);
        losses.push(value);
        let grads = g.backward(loss);
        opt.step(params, &b.collect(&g, &grads))?;
        let last = step + 1 == tc.steps;
        let f1 = if !val.is_empty() && (last || (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0)) {
            let sel = PatchSelector::from_params(config, params)?;
            Some(evaluate_selector(&sel, val, policy)?.per_view_f1)
        } else {
            None
        };
        log(&SelectorLog { step, loss: value, f1 });
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tables::templates;
    use crate::corpus::{gen_query, gen_scene};
    use proptest::prelude::*;

    fn tiny() -> SelectorConfig {
        SelectorConfig { d_model: 16, n_heads: 2, d_ff: 32, ..SelectorConfig::default() }
    }

    fn selector(c: &SelectorConfig) -> PatchSelector {
        PatchSelector::from_params(c, &selector_init(c).unwrap()).unwrap()
    }

    #[test]
    fn lexical_examples() {
        assert_eq!(lexical_match("What is in the front left camera?"), ([0., 1., 0., 0., 0., 0.], true));
        assert_eq!(lexical_match("Is it safe to proceed?"), ([0.; 6], false));
        assert_eq!(lexical_match("check left side then behind"), ([0., 1., 0., 1., 1., 0.], true));
        assert_eq!(lexical_match("FRONT RIGHT"), ([0., 0., 1., 0., 0., 0.], true));
        assert_eq!(lexical_match("look right"), ([0., 0., 1., 0., 0., 1.], true));
    }

    #[test]
    fn lexical_matcher_agrees_with_explicit_labels() {
        for seed in 0..20u64 {
            let spec = gen_scene(seed as u32, seed);
            for t in templates() {
                let q = gen_query(&spec, t.id, seed).unwrap();
                if q.explicit {
                    let (lex, flag) = lexical_match(&q.raw);
                    assert!(flag);
                    assert_eq!(lex.map(|x| x == 1.0), q.view_labels, "{}", q.raw);
                }
            }
        }
    }

    #[test]
    fn logits_are_finite_reproducible_and_pad_invariant() {
        let c = tiny();
        let s = selector(&c);
        let ids = Vocab::standard().encode("how many vehicles are around the ego car ?");
        let a = s.encode_and_score(&ids, &Meter::new()).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, selector(&c).encode_and_score(&ids, &Meter::new()).unwrap());
        let mut padded = ids.clone();
        padded.extend([PAD, PAD, PAD]);
        assert_eq!(a, s.encode_and_score(&padded, &Meter::new()).unwrap());
        assert!(s.encode_and_score(&[], &Meter::new()).is_err());
        assert!(s.encode_and_score(&[c.vocab_size as u32], &Meter::new()).is_err());
    }

    #[test]
    fn graph_scores_match_inference() {
        let c = tiny();
        let p = selector_init(&c).unwrap();
        let s = PatchSelector::from_params(&c, &p).unwrap();
        let mut ids = Vocab::standard().encode("is there a car tailgating us ?");
        ids.push(PAD);
        let want = s.encode_and_score(&ids, &Meter::new()).unwrap();
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, &p, |_| false);
        let got = score_graph(&mut g, &b, &c, &ids).unwrap();
        for (x, y) in g.value(got).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn head_parameters_only_move_their_own_logit() {
        let c = tiny();
        let mut p = selector_init(&c).unwrap();
        let ids = Vocab::standard().encode("describe the whole scene .");
        let before = PatchSelector::from_params(&c, &p).unwrap().encode_and_score(&ids, &Meter::new()).unwrap();
        p.get_mut("patchsel.head_w").unwrap().row_mut(3).iter_mut().for_each(|x| *x += 0.5);
        p.get_mut("patchsel.head_b").unwrap().data_mut()[3] -= 1.0;
        let after = PatchSelector::from_params(&c, &p).unwrap().encode_and_score(&ids, &Meter::new()).unwrap();
        for i in 0..NUM_VIEWS {
            assert_eq!(before[i] == after[i], i != 3);
        }
    }

    #[test]
    fn combine_examples() {
        let mut lex = [0.0; 6];
        lex[0] = 1.0;
        let f = combine_scores(&lex, true, &[0.0; 6], 0.6, 0.4);
        assert!((f[0] - 0.8).abs() < 1e-6);
        let logits = [0.3, -1.0, 2.0, 0.0, 5.0, -3.0];
        assert_eq!(combine_scores(&lex, false, &logits, 0.6, 0.4), logits.map(ops::sigmoid));
        assert_eq!(combine_scores(&lex, true, &logits, 1.0, 0.0), lex);
    }

    #[test]
    fn selection_examples() {
        let m = select_patches(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1], 0.5, Granularity::View, None).unwrap();
        assert_eq!(m.slots(), vec![2, 3]);
        assert!(!m.fallback);
        let m = select_patches(&[0.1, 0.2, 0.3, 0.3, 0.0, 0.0], 0.5, Granularity::View, None).unwrap();
        assert!(m.fallback);
        assert_eq!(m.slots(), vec![4, 5]);
        let m = select_patches(&[0.6, 0.6, 0.0, 0.0, 0.0, 0.0], 0.5, Granularity::Patch, None).unwrap();
        assert_eq!(m.count(), 4);
        let mut per_patch = [0.0; NUM_SLOTS];
        per_patch[7] = 0.7;
        let m = select_patches(&[0.0; 6], 0.5, Granularity::Patch, Some(&per_patch)).unwrap();
        assert_eq!(m.slots(), vec![7]);
        assert!(select_patches(&[0.0; 6], 1.0, Granularity::View, None).is_err());
    }

    proptest! {
        #[test]
        fn raising_the_threshold_never_adds_patches(
            scores in prop::array::uniform6(0.0f32..1.0),
            t1 in 0.01f32..0.99,
            t2 in 0.01f32..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let raw = |t: f32| {
                let mut b = [false; NUM_SLOTS];
                for (s, bit) in b.iter_mut().enumerate() {
                    *bit = scores[slot_view(s).0] >= t;
                }
                b
            };
            let (a, b) = (raw(lo), raw(hi));
            for s in 0..NUM_SLOTS {
                prop_assert!(!b[s] || a[s]);
            }
            let m = select_patches(&scores, hi, Granularity::View, None).unwrap();
            prop_assert_eq!(m.fallback, !b.iter().any(|&x| x));
            prop_assert!(m.count() >= 2);
            if !m.fallback {
                prop_assert_eq!(m.bits, b);
            }
        }
    }

    #[test]
    fn f1_conventions() {
        let t = [[true, false, false, false, false, false]];
        assert_eq!(per_view_f1(&t, &t), [1.0; 6]);
        let p = [[false, true, false, false, false, false]];
        assert_eq!(per_view_f1(&p, &t), [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    fn sample(raw: &str, labels: [bool; 6]) -> QuerySample {
        QuerySample {
            scene_id: 0,
            template_id: 0,
            raw: raw.into(),
            view_labels: labels,
            answer_ids: vec![],
            explicit: false,
        }
    }

    #[test]
    fn all_zero_labels_drive_probabilities_down() {
        let c = tiny();
        let mut p = selector_init(&c).unwrap();
        let data = vec![sample("is it safe to change lanes toward the curb ?", [false; 6])];
        let tc = SelectorTrainConfig { steps: 150, lr: 1e-2, batch: 1, seed: 1, eval_every: 0 };
        let losses =
            train_patch_selector(&c, &mut p, &data, &[], &tc, &SelectionPolicy::default(), |_| {}).unwrap();
        assert!(losses.last().unwrap() < &0.05);
        let s = PatchSelector::from_params(&c, &p).unwrap();
        let probs = s
            .encode_and_score(&Vocab::standard().encode(&data[0].raw), &Meter::new())
            .unwrap()
            .map(ops::sigmoid);
        assert!(probs.iter().all(|&x| x < 0.02), "{probs:?}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty_corpus() {
        let c = tiny();
        let data = vec![
            sample("front", [true, false, false, false, false, false]),
            sample("behind", [false, false, false, true, false, false]),
        ];
        let tc = SelectorTrainConfig { steps: 5, lr: 1e-2, batch: 2, seed: 4, eval_every: 0 };
        let run = || {
            let mut p = selector_init(&c).unwrap();
            train_patch_selector(&c, &mut p, &data, &data, &tc, &SelectionPolicy::default(), |_| {}).unwrap();
            p.to_bytes()
        };
        assert_eq!(run(), run());
        let mut p = selector_init(&c).unwrap();
        assert!(matches!(
            train_patch_selector(&c, &mut p, &[], &[], &tc, &SelectionPolicy::default(), |_| {}),
            Err(Error::EmptyCorpus)
        ));
    }
}
