//! Visual token importance scoring and budgeted pruning before prefill.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::scene::BBox;
use crate::error::{Error, Result};
use crate::nn::graph::layer_graph;
use crate::nn::ops::{self, AttnOptions};
use crate::nn::params::{keyed_rng, seeded_tensor};
use crate::nn::{Adam, AdamConfig, Binder, DecoderLayer, Graph, Meter, ParamSet, Tensor};
use crate::vision::composite::PATCH_SIZE;
use crate::vision::{TokenOrigin, TOKEN_FOOTPRINT};

pub const TOKSEL_ROLE: &str = "toksel.";
const LAYER_PREFIX: &str = "toksel.layer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Attention,
    TrainedHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// One score per visual token.
    pub scores: Vec<f32>,
    pub source: ScoreSource,
}

fn check_span(len: usize, span: &Range<usize>) -> Result<()> {
    if span.is_empty() {
        return Err(Error::InvalidArgument("empty visual span".into()));
    }
    if span.end >= len {
        return Err(Error::InvalidArgument(format!(
            "visual span {span:?} must be followed by text in a sequence of {len}"
        )));
    }
    Ok(())
}

/// Head-averaged attention from the final position to each visual token,
/// read from `layer`'s attention over `embeddings`.
pub fn attention_importance(
    embeddings: &Tensor,
    layer: &DecoderLayer,
    span: Range<usize>,
    meter: &Meter,
) -> Result<ImportanceScores> {
    check_span(embeddings.rows(), &span)?;
    let w = layer.last_row_attention(embeddings, meter)?;
    let (h, n) = (w.shape()[0], w.shape()[1]);
    let scores = span
        .map(|j| (0..h).map(|hh| w.data()[hh * n + j]).sum::<f32>() / h as f32)
        .collect();
    Ok(ImportanceScores { scores, source: ScoreSource::Attention })
}

/// Standalone first-layer replica plus a linear scoring head.
#[derive(Debug, Clone)]
pub struct TokenSelector {
    layer: DecoderLayer,
    head_w: Tensor,
    head_b: f32,
}

/// Copies `{llm_role}layer0.*` into the standalone selector namespace and
/// adds a seeded scoring head.
pub fn toksel_init(llm_params: &ParamSet, llm_role: &str, seed: u64) -> Result<ParamSet> {
    let src = format!("{llm_role}layer0.");
    let mut p = llm_params.with_prefix(&src).rename_prefix(&src, LAYER_PREFIX);
    if p.is_empty() {
        return Err(Error::MissingParam(format!("{src}*")));
    }
    let d = p.get(&format!("{LAYER_PREFIX}wq"))?.cols();
    p.insert(
        format!("{TOKSEL_ROLE}head_w"),
        seeded_tensor(seed, TOKSEL_ROLE, "head_w", &[d, 1], (1.0 / d as f32).sqrt()),
    );
    p.insert(format!("{TOKSEL_ROLE}head_b"), Tensor::zeros(&[1]));
    Ok(p)
}

impl TokenSelector {
    pub fn from_params(params: &ParamSet, n_heads: usize) -> Result<Self> {
        Ok(Self {
            layer: DecoderLayer::from_params(params, LAYER_PREFIX, n_heads)?,
            head_w: params.get(&format!("{TOKSEL_ROLE}head_w"))?.clone(),
            head_b: params.get(&format!("{TOKSEL_ROLE}head_b"))?.data()[0],
        })
    }

    /// Raw head outputs (logits) for the visual tokens.
    pub fn logits(&self, embeddings: &Tensor, span: Range<usize>, meter: &Meter) -> Result<Vec<f32>> {
        check_span(embeddings.rows(), &span)?;
        // Causal, and visual tokens precede the text, so only the prefix
        // up to the end of the span influences their hidden states.
        let prefix = embeddings.gather_rows(&(0..span.end).collect::<Vec<_>>());
        let (h, _) = self.layer.forward(&prefix, None, AttnOptions::causal(), meter)?;
        let hv = h.gather_rows(&span.collect::<Vec<_>>());
        let z = ops::matmul(&hv, &self.head_w, meter)?;
        Ok(z.data().iter().map(|&x| x + self.head_b).collect())
    }

    pub fn head_importance(
        &self,
        embeddings: &Tensor,
        span: Range<usize>,
        meter: &Meter,
    ) -> Result<ImportanceScores> {
        let scores = self.logits(embeddings, span, meter)?.into_iter().map(ops::sigmoid).collect();
        Ok(ImportanceScores { scores, source: ScoreSource::TrainedHead })
    }
}

/// Flags tokens whose 28x28 footprint overlaps a box in the same view.
/// `boxes` are `(view_id, box)` pairs in view pixel coordinates.
pub fn forced_keep_flags(origin: &[TokenOrigin], boxes: &[(usize, BBox)]) -> Result<Vec<bool>> {
    if let Some((v, b)) = boxes.iter().find(|(_, b)| !b.in_view_bounds()) {
        return Err(Error::InvalidArgument(format!("box {b:?} outside view {v}")));
    }
    let f = TOKEN_FOOTPRINT as u32;
    Ok(origin
        .iter()
        .map(|o| {
            let x0 = o.patch_index as u32 * PATCH_SIZE as u32 + o.col as u32 * f;
            let y0 = o.row as u32 * f;
            boxes
                .iter()
                .any(|(v, b)| *v == o.view_id as usize && b.intersects(x0, y0, x0 + f, y0 + f))
        })
        .collect())
}

/// Half-away-from-zero rounding of `r · total`.
pub fn keep_budget(r: f64, total: usize) -> usize {
    (r * total as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedSequence {
    /// Kept rows, original order, `[index_map.len(), d]`.
    #[serde(skip)]
    pub embeddings: Option<Tensor>,
    /// Kept position -> original position, strictly increasing.
    pub index_map: Vec<usize>,
    pub text_tokens: usize,
    pub visual_kept: usize,
    pub visual_total: usize,
    pub effective_ratio: f64,
}

/// Chooses positions to keep: every non-visual position, every forced
/// visual token, and the best-scoring others up to `round(r · visual)`.
/// Ties go to the lower index.
pub fn prune_indices(
    len: usize,
    span: Range<usize>,
    scores: &[f32],
    forced: &[bool],
    r: f64,
) -> Result<PrunedSequence> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep ratio {r} outside (0, 1]")));
    }
    let total = span.len();
    if span.end > len || scores.len() != total || forced.len() != total {
        return Err(Error::Shape(format!(
            "span {span:?} of {len}, {} scores, {} flags",
            scores.len(),
            forced.len()
        )));
    }
    let budget = keep_budget(r, total);
    let mut keep: Vec<bool> = forced.to_vec();
    let n_forced = forced.iter().filter(|&&f| f).count();
    if budget > n_forced {
        let mut rest: Vec<usize> = (0..total).filter(|&j| !forced[j]).collect();
        rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &j in rest.iter().take(budget - n_forced) {
            keep[j] = true;
        }
    }
    let index_map: Vec<usize> = (0..len)
        .filter(|&i| !span.contains(&i) || keep[i - span.start])
        .collect();
    let visual_kept = keep.iter().filter(|&&k| k).count();
    Ok(PrunedSequence {
        embeddings: None,
        text_tokens: len - total,
        visual_kept,
        visual_total: total,
        effective_ratio: if total == 0 { 1.0 } else { visual_kept as f64 / total as f64 },
        index_map,
    })
}

/// [`prune_indices`] applied to an embedding sequence.
pub fn prune(
    embeddings: &Tensor,
    span: Range<usize>,
    scores: &ImportanceScores,
    forced: &[bool],
    r: f64,
) -> Result<PrunedSequence> {
    let mut p = prune_indices(embeddings.rows(), span, &scores.scores, forced, r)?;
    p.embeddings = Some(embeddings.gather_rows(&p.index_map));
    Ok(p)
}

/// `clip(α · attn / max(attn) + (1 − α) · flag, 0, 1)` per token.
pub fn synth_labels(attention: &[f32], flags: &[bool], alpha: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if attention.len() != flags.len() {
        return Err(Error::Shape(format!("{} scores vs {} flags", attention.len(), flags.len())));
    }
    let max = attention.iter().cloned().fold(0.0f32, f32::max);
    Ok(attention
        .iter()
        .zip(flags)
        .map(|(&a, &f)| {
            let norm = if max > 0.0 { a / max } else { 0.0 };
            (alpha * norm + (1.0 - alpha) * f as u8 as f32).clamp(0.0, 1.0)
        })
        .collect())
}

/// One training sequence for the token selector.
#[derive(Debug, Clone)]
pub struct TokselExample {
    pub embeddings: Tensor,
    pub span: Range<usize>,
    pub labels: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TokselTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

/// Mean BCE between head outputs and labels; only `toksel.` parameters move.
pub fn train_token_selector(
    params: &mut ParamSet,
    n_heads: usize,
    examples: &[TokselExample],
    tc: &TokselTrainConfig,
    mut log: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = keyed_rng(tc.seed, "toksel.train.", "order");
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr));
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let ex = &examples[rng.gen_range(0..examples.len())];
        check_span(ex.embeddings.rows(), &ex.span)?;
        if ex.labels.len() != ex.span.len() {
            return Err(Error::Shape(format!("{} labels for span {:?}", ex.labels.len(), ex.span)));
        }
        let mut g = Graph::new();
        let b = Binder::bind(&mut g, params, |n| n.starts_with(TOKSEL_ROLE));
        let prefix = ex.embeddings.gather_rows(&(0..ex.span.end).collect::<Vec<_>>());
        let x = g.leaf(prefix);
        let h = layer_graph(&mut g, &b, LAYER_PREFIX, x, n_heads, true, None)?;
        let hv = g.rows(h, &ex.span.clone().collect::<Vec<_>>())?;
        let z = g.matmul(hv, b.var(&format!("{TOKSEL_ROLE}head_w"))?)?;
        let z = g.add_bias(z, b.var(&format!("{TOKSEL_ROLE}head_b"))?)?;
        let loss = g.bce_with_logits(z, &ex.labels, ex.labels.len() as f32)?;
        let value = g.scalar(loss);
        losses.push(value);
        let grads = g.backward(loss);
        opt.step(params, &b.collect(&g, &grads))?;
        log(step, value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_layer;
    use proptest::prelude::*;

    fn layer_params(d: usize) -> ParamSet {
        let mut p = ParamSet::new();
        init_layer(&mut p, 9, "llm.", "layer0.", d, 2 * d);
        p
    }

    #[test]
    fn identical_embeddings_give_uniform_scores() {
        let p = layer_params(8);
        let layer = DecoderLayer::from_params(&p, "llm.layer0.", 2).unwrap();
        let x = Tensor::full(&[6, 8], 0.3);
        let s = attention_importance(&x, &layer, 1..5, &Meter::new()).unwrap();
        assert_eq!(s.scores.len(), 4);
        for w in &s.scores {
            assert!((w - 1.0 / 6.0).abs() < 1e-6);
        }
        assert_eq!(s, attention_importance(&x, &layer, 1..5, &Meter::new()).unwrap());
        assert!(attention_importance(&x, &layer, 2..2, &Meter::new()).is_err());
        assert!(attention_importance(&x, &layer, 2..6, &Meter::new()).is_err());
    }

    #[test]
    fn single_visual_token_matches_hand_computed_attention() {
        // One head, d = 2, LN with g = 1, b = 0 maps each 2-vector to (±1, ∓1).
        let d = 2;
        let mut p = layer_params(d);
        for w in ["wq", "wk"] {
            *p.get_mut(&format!("llm.layer0.{w}")).unwrap() = Tensor::from_rows(2, 2, vec![1., 0., 0., 1.]);
        }
        let layer = DecoderLayer::from_params(&p, "llm.layer0.", 1).unwrap();
        let x = Tensor::from_rows(3, 2, vec![1., 0., 0., 1., 2., 1.]);
        let s = attention_importance(&x, &layer, 1..2, &Meter::new()).unwrap();
        // normalized rows: (1,-1), (-1,1), (1,-1); last query (1,-1)
        let scale = 1.0 / 2f32.sqrt();
        let logits = [2.0 * scale, -2.0 * scale, 2.0 * scale];
        let z: f32 = logits.iter().map(|l| l.exp()).sum();
        let want = logits[1].exp() / z;
        assert!((s.scores[0] - want).abs() < 1e-5, "{} vs {want}", s.scores[0]);
    }

    fn selector(d: usize) -> (ParamSet, TokenSelector) {
        let p = toksel_init(&layer_params(d), "llm.", 1).unwrap();
        let s = TokenSelector::from_params(&p, 2).unwrap();
        (p, s)
    }

    #[test]
    fn zero_head_scores_one_half_and_range() {
        let (mut p, s) = selector(8);
        let x = seeded_tensor(1, "t.", "x", &[10, 8], 1.0);
        let sc = s.head_importance(&x, 2..8, &Meter::new()).unwrap();
        assert!(sc.scores.iter().all(|&v| v > 0.0 && v < 1.0));
        *p.get_mut("toksel.head_w").unwrap() = Tensor::zeros(&[8, 1]);
        let s = TokenSelector::from_params(&p, 2).unwrap();
        let sc = s.head_importance(&x, 2..8, &Meter::new()).unwrap();
        assert!(sc.scores.iter().all(|&v| v == 0.5));
    }

    fn origin_grid(view: u8, patch: u8) -> Vec<TokenOrigin> {
        (0..256)
            .map(|t| TokenOrigin { slot: 0, view_id: view, patch_index: patch, row: (t / 16) as u8, col: (t % 16) as u8 })
            .collect()
    }

    #[test]
    fn forced_flags_geometry() {
        let mut origin = origin_grid(2, 0);
        origin.extend(origin_grid(2, 1));
        origin.extend(origin_grid(3, 0));
        let whole = BBox { x: 0, y: 0, w: 896, h: 448 };
        let f = forced_keep_flags(&origin, &[(2, whole)]).unwrap();
        assert_eq!(f.iter().filter(|&&x| x).count(), 512);
        assert!(f[512..].iter().all(|&x| !x));
        assert!(forced_keep_flags(&origin, &[]).unwrap().iter().all(|&x| !x));
        assert!(forced_keep_flags(&origin, &[(2, BBox { x: 880, y: 0, w: 20, h: 5 })]).is_err());

        // Aligned 28x28 box in the second patch: oracle scans every footprint.
        let b = BBox { x: 448 + 5 * 28, y: 7 * 28, w: 28, h: 28 };
        let f = forced_keep_flags(&origin, &[(2, b)]).unwrap();
        let hits: Vec<usize> = (0..f.len()).filter(|&i| f[i]).collect();
        assert_eq!(hits, vec![256 + 7 * 16 + 5]);
    }

    #[test]
    fn table_budgets() {
        let check = |visual: usize, r: f64, text: usize| {
            let len = visual + text;
            let scores: Vec<f32> = (0..visual).map(|i| ((i * 37) % 101) as f32).collect();
            let p = prune_indices(len, 0..visual, &scores, &vec![false; visual], r).unwrap();
            p.index_map.len()
        };
        assert_eq!(check(3072, 0.7, 142), 2292);
        assert_eq!(check(896, 0.9, 142), 948);
        assert_eq!(check(3072, 0.3, 142), 1064);
        assert_eq!(check(896, 0.8, 142), 859);
        assert_eq!(keep_budget(0.5, 5), 3);
    }

    #[test]
    fn identity_and_forced_overflow() {
        let p = prune_indices(8, 2..6, &[0.1, 0.4, 0.2, 0.3], &[false; 4], 1.0).unwrap();
        assert_eq!(p.index_map, (0..8).collect::<Vec<_>>());
        let forced: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let p = prune_indices(21, 0..20, &[0.0; 20], &forced, 0.25).unwrap();
        assert_eq!(p.visual_kept, 10);
        assert!(p.effective_ratio > 0.25);
        assert!(prune_indices(4, 0..2, &[0.; 2], &[false; 2], 0.0).is_err());
        let t = Tensor::from_rows(4, 1, vec![0., 1., 2., 3.]);
        let s = ImportanceScores { scores: vec![0.5, 0.1, 0.9], source: ScoreSource::Attention };
        let p = prune(&t, 0..3, &s, &[false; 3], 0.5).unwrap();
        assert_eq!(p.embeddings.unwrap().data(), &[0., 2., 3.]);
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>, Vec<bool>, f64, f64)> {
        (0usize..5, 1usize..60, 1usize..6).prop_flat_map(|(pre, vis, post)| {
            (
                Just(pre),
                Just(vis),
                Just(post),
                prop::collection::vec(prop_oneof![(0u8..4).prop_map(|x| x as f32), -1.0f32..1.0], vis),
                prop::collection::vec(prop::bool::weighted(0.15), vis),
                0.01f64..=1.0,
                0.01f64..=1.0,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn pruning_invariants((pre, vis, post, scores, forced, r1, r2) in arb_case()) {
            let len = pre + vis + post;
            let span = pre..pre + vis;
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = prune_indices(len, span.clone(), &scores, &forced, lo).unwrap();
            let b = prune_indices(len, span.clone(), &scores, &forced, hi).unwrap();
            let n_forced = forced.iter().filter(|&&f| f).count();
            for p in [&a, &b] {
                prop_assert!(p.index_map.windows(2).all(|w| w[0] < w[1]));
                for i in (0..len).filter(|i| !span.contains(i)) {
                    prop_assert!(p.index_map.contains(&i));
                }
                for j in (0..vis).filter(|&j| forced[j]) {
                    prop_assert!(p.index_map.contains(&(pre + j)));
                }
                prop_assert_eq!(p.text_tokens + p.visual_kept, p.index_map.len());
            }
            prop_assert_eq!(a.visual_kept, keep_budget(lo, vis).max(n_forced));
            prop_assert_eq!(b.visual_kept, keep_budget(hi, vis).max(n_forced));
            for i in &a.index_map {
                prop_assert!(b.index_map.contains(i));
            }
        }
    }

    #[test]
    fn label_synthesis() {
        assert_eq!(synth_labels(&[0.2, 0.5, 0.1], &[true, false, true], 0.0).unwrap(), vec![1., 0., 1.]);
        let l = synth_labels(&[0.2, 0.5, 0.1], &[false; 3], 1.0).unwrap();
        assert_eq!(l[1], 1.0);
        let l = synth_labels(&[0.4, 1.0], &[true, false], 0.5).unwrap();
        assert!((l[0] - 0.7).abs() < 1e-6);
        assert_eq!(synth_labels(&[0.0; 3], &[false; 3], 0.5).unwrap(), vec![0.0; 3]);
        assert!(synth_labels(&[0.0], &[false], 1.5).is_err());
    }

    fn spearman(a: &[f32], b: &[f32]) -> f64 {
        fn ranks(x: &[f32]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
            let mut r = vec![0.0; x.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                    j += 1;
                }
                for k in i..=j {
                    r[idx[k]] = (i + j) as f64 / 2.0;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn separable(seed: u64, d: usize) -> TokselExample {
        let x = seeded_tensor(seed, "sep.", "x", &[14, d], 1.0);
        let u = seeded_tensor(0, "sep.", "u", &[d], 1.0);
        let labels = (1..12)
            .map(|j| ops::sigmoid(2.0 * x.row(j).iter().zip(u.data()).map(|(a, b)| a * b).sum::<f32>()))
            .collect();
        TokselExample { embeddings: x, span: 1..12, labels }
    }

    #[test]
    fn training_learns_separable_rankings_and_leaves_llm_untouched() {
        let d = 8;
        let llm = layer_params(d);
        let before = llm.checksum();
        let mut p = toksel_init(&llm, "llm.", 1).unwrap();
        let train: Vec<_> = (0..32).map(|s| separable(s, d)).collect();
        let tc = TokselTrainConfig { steps: 600, lr: 1e-2, seed: 3 };
        let losses = train_token_selector(&mut p, 2, &train, &tc, |_, _| {}).unwrap();
        let early: f32 = losses[..20].iter().sum::<f32>() / 20.0;
        let late: f32 = losses[losses.len() - 20..].iter().sum::<f32>() / 20.0;
        assert!(late < early);
        assert_eq!(llm.checksum(), before);
        let s = TokenSelector::from_params(&p, 2).unwrap();
        let mut rho = 0.0;
        for seed in 100..110 {
            let ex = separable(seed, d);
            let sc = s.head_importance(&ex.embeddings, ex.span.clone(), &Meter::new()).unwrap();
            rho += spearman(&sc.scores, &ex.labels) / 10.0;
        }
        assert!(rho >= 0.8, "spearman {rho}");
        assert!(train_token_selector(&mut p, 2, &[], &tc, |_, _| {}).is_err());
    }

    #[test]
    fn constant_labels_train_to_one_half() {
        let d = 8;
        let mut p = toksel_init(&layer_params(d), "llm.", 2).unwrap();
        let mut ex = separable(1, d);
        ex.labels = vec![0.5; ex.labels.len()];
        let tc = TokselTrainConfig { steps: 300, lr: 1e-2, seed: 0 };
        train_token_selector(&mut p, 2, &[ex.clone()], &tc, |_, _| {}).unwrap();
        let s = TokenSelector::from_params(&p, 2).unwrap();
        let sc = s.head_importance(&ex.embeddings, ex.span.clone(), &Meter::new()).unwrap();
        assert!(sc.scores.iter().all(|v| (v - 0.5).abs() < 0.02), "{:?}", sc.scores);
    }
}
