//! Pipeline configuration: one JSON document per run.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cost::Profile;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::patchsel::{Granularity, SelectionPolicy, SelectorConfig};
use crate::specdec::MAX_DRAFT_LEN;
use crate::vision::{VisionConfig, NUM_SLOTS, TOKENS_PER_PATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// All patches, no pruning, autoregressive decoding.
    Baseline,
    /// All patches, attention-score pruning, autoregressive decoding.
    Fastv,
    /// All patches, no pruning, speculative decoding.
    Eagle,
    /// Patch selection, token selection with forced keeps, speculative decoding.
    Litevlm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Baseline, Self::Fastv, Self::Eagle, Self::Litevlm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fastv => "fastv",
            Self::Eagle => "eagle",
            Self::Litevlm => "litevlm",
        }
    }

    pub fn speculative(self) -> bool {
        matches!(self, Self::Eagle | Self::Litevlm)
    }

    pub fn prunes(self) -> bool {
        matches!(self, Self::Fastv | Self::Litevlm)
    }

    pub fn selects_patches(self) -> bool {
        self == Self::Litevlm
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScoring {
    /// Head-mean last-row attention of the language model's first layer.
    Attention,
    /// The trained standalone token selector.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub precision: Profile,
    /// Fraction of visual tokens kept; required by pruning variants.
    pub keep_ratio: Option<f64>,
    /// Patch-selection threshold; required by `litevlm`.
    pub threshold: Option<f32>,
    pub w_lex: f32,
    pub w_model: f32,
    pub granularity: Granularity,
    pub token_scoring: TokenScoring,
    /// Blend weight of attention in synthesized token-selector labels.
    pub label_alpha: f32,
    pub draft_len: usize,
    pub max_new: usize,
    /// Overrides the seed of every model config below.
    pub seed: u64,
    pub vit: VisionConfig,
    pub llm: ModelConfig,
    pub selector: SelectorConfig,
    pub draft_d_ff: usize,
    /// Calibration JSON; the shipped one when absent.
    pub calibration: Option<String>,
    /// Directory of `*.lvlm` parameter files, relative to the workdir.
    pub params_dir: String,
}

/// Prompt budget: every patch, the longest query, a separator.
pub fn max_prompt_len(selector: &SelectorConfig) -> usize {
    NUM_SLOTS * TOKENS_PER_PATCH + selector.max_len + 1
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let selector = SelectorConfig::default();
        let max_new = 24;
        Self {
            variant: Variant::Litevlm,
            precision: Profile::Fp16,
            keep_ratio: Some(0.8),
            threshold: Some(0.5),
            w_lex: 0.6,
            w_model: 0.4,
            granularity: Granularity::Patch,
            token_scoring: TokenScoring::Head,
            label_alpha: 0.5,
            draft_len: 4,
            max_new,
            seed: 0,
            vit: VisionConfig::default(),
            llm: ModelConfig {
                d_model: 64,
                n_heads: 4,
                n_layers: 2,
                d_ff: 256,
                vocab_size: Vocab::standard().len(),
                max_seq: max_prompt_len(&selector) + max_new,
                seed: 0,
            },
            selector,
            draft_d_ff: 256,
            calibration: None,
            params_dir: "params".into(),
        }
    }
}

impl PipelineConfig {
    /// Small model dimensions for tests and quick runs.
    pub fn tiny() -> Self {
        let mut c = Self {
            vit: VisionConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, d_out: 32, seed: 0 },
            draft_d_ff: 64,
            ..Self::default()
        };
        c.llm.d_model = 32;
        c.llm.n_heads = 2;
        c.llm.d_ff = 64;
        c.selector.d_model = 32;
        c.selector.n_heads = 2;
        c.selector.d_ff = 64;
        c.resolve()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        Ok(c.resolve())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Propagates the shared seed and ties the vision output width to the
    /// language model.
    pub fn resolve(mut self) -> Self {
        self.vit.seed = self.seed;
        self.llm.seed = self.seed;
        self.selector.seed = self.seed;
        self.vit.d_out = self.llm.d_model;
        self
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            threshold: self.threshold.unwrap_or(0.5),
            w_lex: self.w_lex,
            w_model: self.w_model,
            granularity: self.granularity,
        }
    }

    /// Keep ratio applied by this variant; 1 for variants that don't prune.
    pub fn effective_keep_ratio(&self) -> f64 {
        if self.variant.prunes() {
            self.keep_ratio.unwrap_or(1.0)
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.llm.validate()?;
        self.selector.validate()?;
        if self.vit.d_out != self.llm.d_model {
            return Err(Error::Config("vit.d_out must equal llm.d_model".into()));
        }
        let vocab = Vocab::standard().len();
        if self.llm.vocab_size != vocab || self.selector.vocab_size != vocab {
            return Err(Error::Config(format!("vocab_size must be {vocab} for the shipped vocabulary")));
        }
        let need = max_prompt_len(&self.selector) + self.max_new;
        if self.llm.max_seq < need {
            return Err(Error::Config(format!("llm.max_seq {} < {need} needed", self.llm.max_seq)));
        }
        if self.variant.prunes() {
            match self.keep_ratio {
                Some(r) if r > 0.0 && r <= 1.0 => {}
                Some(r) => return Err(Error::Config(format!("keep_ratio {r} outside (0, 1]"))),
                None => return Err(Error::Config(format!("{} requires keep_ratio", self.variant.name()))),
            }
        }
        if self.variant.selects_patches() {
            if self.threshold.is_none() {
                return Err(Error::Config("litevlm requires threshold".into()));
            }
            self.policy().validate()?;
        }
        if self.variant.speculative() && !(1..=MAX_DRAFT_LEN).contains(&self.draft_len) {
            return Err(Error::Config(format!("draft_len {} outside 1..={MAX_DRAFT_LEN}", self.draft_len)));
        }
        if self.max_new == 0 {
            return Err(Error::Config("max_new must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_alpha) {
            return Err(Error::Config("label_alpha outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// A bench variant, optionally with its own keep ratio: `fastv@0.3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    pub keep_ratio: Option<f64>,
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, ratio) = match s.split_once('@') {
            Some((n, r)) => {
                let r: f64 = r
                    .parse()
                    .map_err(|_| Error::Config(format!("bad keep ratio in {s:?}")))?;
                (n, Some(r))
            }
            None => (s, None),
        };
        Ok(Self { variant: name.trim().parse()?, keep_ratio: ratio })
    }
}

impl VariantSpec {
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.with_variant(self.variant);
        if self.keep_ratio.is_some() {
            c.keep_ratio = self.keep_ratio;
        }
        c
    }

    pub fn label(&self) -> String {
        match self.keep_ratio {
            Some(r) => format!("{}@{r}", self.variant.name()),
            None => self.variant.name().to_string(),
        }
    }
}
