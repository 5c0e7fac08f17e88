//! End-to-end execution of one (scene, query) pair with stage counters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::config::{PipelineConfig, TokenScoring, Variant};
use crate::corpus::scene::{render_all, BBox, SceneSpec};
use crate::corpus::tables::EOS;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::llm::{LanguageModel, LLM_ROLE};
use crate::nn::{Meter, Tensor};
use crate::patchsel::{PatchSelector, ViewScores, PATCHSEL_ROLE};
use crate::specdec::{decode_autoregressive, decode_speculative, DecodeMeters, Draft, DRAFT_ROLE};
use crate::toksel::{attention_importance, forced_keep_flags, prune, TokenSelector, TOKSEL_ROLE};
use crate::vision::encoder::VIT_ROLE;
use crate::vision::{extract_patches, stitch_views, vit_encode, PatchMask, VisionEncoder};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTimes {
    pub selection_s: f64,
    pub vit_s: f64,
    pub pruning_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
}

/// Counters for one pipeline run.
///
/// The prefill stage runs every prompt position but the last, which is fed
/// with the first decode forward; `prefill_tokens` counts the whole prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub vit_patches: usize,
    pub vit_madds: u64,
    pub selection_madds: u64,
    pub pruning_madds: u64,
    pub text_tokens: usize,
    pub visual_total: usize,
    pub visual_kept: usize,
    pub forced_count: usize,
    pub prefill_tokens: usize,
    pub prefill_madds: u64,
    pub decode_iterations: usize,
    pub generated_tokens: usize,
    pub accepted_hist: Vec<usize>,
    pub decode_madds: u64,
    pub draft_madds: u64,
    pub selection_fallback: bool,
    pub wall: WallTimes,
}

/// Which closed-form count to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    VitPerPatch,
    /// Fresh causal forward over `n` positions, layers only.
    Prefill(u64),
    /// One new position against `n_ctx` keys, LM head included.
    DecodeStep(u64),
}

/// Loaded models for one configuration.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub vit: VisionEncoder,
    pub llm: LanguageModel,
    pub selector: Option<PatchSelector>,
    pub toksel: Option<TokenSelector>,
    pub draft: Option<Draft>,
}

fn need<'a, T>(x: &'a Option<T>, role: &str) -> Result<&'a T> {
    x.as_ref().ok_or_else(|| Error::MissingParam(format!("{role}* (no parameters for this role)")))
}

impl Pipeline {
    pub fn new(config: &PipelineConfig, bundle: &ModelBundle) -> Result<Self> {
        config.validate()?;
        let llm = LanguageModel::from_params(&config.llm, need(&bundle.llm, LLM_ROLE)?, LLM_ROLE)?;
        let v = config.variant;
        let selector = if v.selects_patches() {
            Some(PatchSelector::from_params(&config.selector, need(&bundle.patchsel, PATCHSEL_ROLE)?)?)
        } else {
            None
        };
        let toksel = match &bundle.toksel {
            Some(p) if v.prunes() => Some(TokenSelector::from_params(p, config.llm.n_heads)?),
            _ => None,
        };
        let draft = if v.speculative() {
            Some(Draft::from_params(need(&bundle.draft, DRAFT_ROLE)?, config.llm.n_heads)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            vit: VisionEncoder::from_params(&config.vit, need(&bundle.vit, VIT_ROLE)?)?,
            llm,
            selector,
            toksel,
            draft,
        })
    }

    pub fn analytic_madds(&self, stage: Stage) -> u64 {
        match stage {
            Stage::VitPerPatch => self.config.vit.patch_madds(),
            Stage::Prefill(n) => self.llm.prefill_madds(n),
            Stage::DecodeStep(n) => self.llm.decode_step_madds(n),
        }
    }

    /// Query ids followed by the separator the answer starts after.
    pub fn text_ids(&self, raw: &str) -> Vec<u32> {
        super::train::query_prompt(raw)
    }

    /// Patch mask for a query under this variant.
    pub fn select(&self, raw: &str, meter: &Meter) -> Result<(Option<ViewScores>, PatchMask)> {
        match &self.selector {
            Some(sel) => {
                let policy = self.config.policy();
                let ids = Vocab::standard().encode(raw);
                let logits = sel.encode_and_score(&ids, meter)?;
                let scores = ViewScores::new(raw, logits, &policy)?;
                let mask = crate::patchsel::select_patches(&scores.final_scores, policy.threshold, policy.granularity, None)?;
                Ok((Some(scores), mask))
            }
            None => Ok((None, PatchMask::all())),
        }
    }
}

/// Critical-object boxes as `(view, box)` pairs.
pub fn critical_boxes(scene: &SceneSpec) -> Vec<(usize, BBox)> {
    scene
        .views
        .iter()
        .enumerate()
        .flat_map(|(v, objs)| objs.iter().filter(|o| o.class.is_critical()).map(move |o| (v, o.bbox)))
        .collect()
}

/// Unpruned prompt for a query: visual tokens of the selected patches, then
/// the query text. Also returns the token origins and the mask.
pub fn build_prompt(
    pipe: &Pipeline,
    scene: &SceneSpec,
    raw: &str,
    metrics: &mut StageMetrics,
) -> Result<(Tensor, Vec<crate::vision::TokenOrigin>, PatchMask)> {
    let t = Instant::now();
    let meter = Meter::new();
    let (_, mask) = pipe.select(raw, &meter)?;
    metrics.selection_madds = meter.take();
    metrics.selection_fallback = mask.fallback;
    metrics.wall.selection_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let composite = stitch_views(&render_all(scene))?;
    let patches = extract_patches(&composite, &mask)?;
    let visual = vit_encode(&patches, &pipe.vit, &meter)?;
    metrics.vit_patches = patches.len();
    metrics.vit_madds = meter.take();
    metrics.wall.vit_s = t.elapsed().as_secs_f64();

    let text = pipe.llm.embed_tokens(&pipe.text_ids(raw))?;
    metrics.text_tokens = text.rows();
    metrics.visual_total = visual.tokens.rows();
    Ok((Tensor::vstack(&[&visual.tokens, &text])?, visual.origin, mask))
}

/// Runs the variant's stage graph and returns the answer tokens.
pub fn run_pipeline(pipe: &Pipeline, scene: &SceneSpec, raw: &str) -> Result<(Vec<u32>, StageMetrics)> {
    let cfg = &pipe.config;
    let mut m = StageMetrics::default();
    let (prompt, origin, _) = build_prompt(pipe, scene, raw, &mut m)?;
    let span = 0..m.visual_total;

    let t = Instant::now();
    let r = cfg.effective_keep_ratio();
    let prompt = if r < 1.0 {
        let meter = Meter::new();
        let positioned = pipe.llm.with_positions(&prompt, 0)?;
        let (scores, forced) = match cfg.variant {
            Variant::Fastv => (
                attention_importance(&positioned, pipe.llm.first_layer(), span.clone(), &meter)?,
                vec![false; span.len()],
            ),
            _ => {
                let scores = match (cfg.token_scoring, &pipe.toksel) {
                    (TokenScoring::Head, Some(ts)) => ts.head_importance(&positioned, span.clone(), &meter)?,
                    (TokenScoring::Head, None) => {
                        return Err(Error::MissingParam(format!("{TOKSEL_ROLE}* (no parameters for this role)")))
                    }
                    (TokenScoring::Attention, _) => {
                        attention_importance(&positioned, pipe.llm.first_layer(), span.clone(), &meter)?
                    }
                };
                (scores, forced_keep_flags(&origin, &critical_boxes(scene))?)
            }
        };
        m.forced_count = forced.iter().filter(|&&f| f).count();
        let pruned = prune(&prompt, span.clone(), &scores, &forced, r)?;
        m.pruning_madds = meter.take();
        m.visual_kept = pruned.visual_kept;
        pruned.embeddings.expect("prune fills embeddings")
    } else {
        m.visual_kept = m.visual_total;
        prompt
    };
    m.wall.pruning_s = t.elapsed().as_secs_f64();
    m.prefill_tokens = prompt.rows();

    let t = Instant::now();
    let meters = DecodeMeters::default();
    let out = match &pipe.draft {
        Some(draft) => decode_speculative(&pipe.llm, draft, &prompt, cfg.draft_len, cfg.max_new, Some(EOS), &meters)?,
        None => decode_autoregressive(&pipe.llm, &prompt, cfg.max_new, Some(EOS), &meters)?,
    };
    let total = t.elapsed().as_secs_f64();
    m.wall.prefill_s = out.prefill_seconds;
    m.wall.decode_s = total - out.prefill_seconds;
    m.prefill_madds = meters.prefill.madds();
    m.decode_madds = meters.decode.madds();
    m.draft_madds = meters.draft.madds();
    m.decode_iterations = out.stats.iterations;
    m.generated_tokens = out.stats.total_generated;
    m.accepted_hist = out.stats.accepted_hist;
    Ok((out.tokens, m))
}
