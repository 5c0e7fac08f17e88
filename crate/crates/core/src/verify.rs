//! Self-checks behind the `verify` subcommand: speculative losslessness and
//! the latency-table arithmetic.

use rand::Rng;
use serde::Serialize;

use crate::corpus::tables::EOS;
use crate::error::Result;
use crate::llm::LanguageModel;
use crate::nn::params::keyed_rng;
use crate::pipeline::CostCalibration;
use crate::specdec::{decode_autoregressive, decode_speculative, DecodeMeters, Draft, MAX_DRAFT_LEN};
use crate::toksel::prune_indices;
use crate::vision::TOKENS_PER_PATCH;

/// Mean query length the latency table's token counts assume.
pub const TABLE_TEXT_TOKENS: usize = 142;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Draft lengths exercised by the losslessness check.
pub const DRAFT_LENGTHS: [usize; 4] = [1, 2, 4, 8];

/// Compares speculative and autoregressive greedy output on `n_prompts`
/// random token prompts for every draft in `drafts` and every length in
/// [`DRAFT_LENGTHS`]. Returns the number of mismatching runs.
pub fn speculative_mismatches(
    target: &LanguageModel,
    drafts: &[&Draft],
    n_prompts: usize,
    max_new: usize,
    seed: u64,
) -> Result<usize> {
    let mut rng = keyed_rng(seed, "verify.", "prompts");
    let vocab = target.vocab_size() as u32;
    let mut bad = 0;
    for _ in 0..n_prompts {
        let len = rng.gen_range(1..=24);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let x = target.embed_tokens(&ids)?;
        let want = decode_autoregressive(target, &x, max_new, Some(EOS), &DecodeMeters::default())?.tokens;
        for draft in drafts {
            for d in DRAFT_LENGTHS.into_iter().filter(|&d| d <= MAX_DRAFT_LEN) {
                let got = decode_speculative(target, draft, &x, d, max_new, Some(EOS), &DecodeMeters::default())?;
                bad += usize::from(got.tokens != want);
            }
        }
    }
    Ok(bad)
}

/// Prefill length of a prompt with `patches` encoded patches, keep ratio
/// `r` and `text` query tokens, counted by running the pruner.
pub fn pruned_prompt_len(patches: usize, r: f64, text: usize) -> Result<usize> {
    let visual = patches * TOKENS_PER_PATCH;
    let scores: Vec<f32> = (0..visual).map(|i| (i * 7919 % 1009) as f32).collect();
    let p = prune_indices(visual + text, 0..visual, &scores, &vec![false; visual], r)?;
    Ok(p.index_map.len())
}

/// Input-token column of the latency table reproduced from patch counts,
/// keep ratios and the mean query length. Fractional patch counts average
/// the two neighbouring integer counts.
pub fn table_token_checks(calib: &CostCalibration) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for row in &calib.rows {
        let r = row.keep_ratio.unwrap_or(1.0);
        let (lo, hi) = (row.patches.floor() as usize, row.patches.ceil() as usize);
        let tokens = if lo == hi {
            pruned_prompt_len(lo, r, TABLE_TEXT_TOKENS)? as f64
        } else {
            let w = row.patches - lo as f64;
            (1.0 - w) * pruned_prompt_len(lo, r, TABLE_TEXT_TOKENS)? as f64
                + w * pruned_prompt_len(hi, r, TABLE_TEXT_TOKENS)? as f64
        };
        let diff = (tokens - row.input_tokens).abs();
        out.push(Check::new(
            format!("input tokens, {}", row.name),
            diff <= 1.0,
            format!("{tokens} vs table {}", row.input_tokens),
        ));
    }
    Ok(out)
}

/// Rounds half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Modeled speedups of every table row: within 2% of the ratio of the
/// table's own totals, and equal to the printed one-decimal value.
pub fn speedup_checks(calib: &CostCalibration) -> Result<Vec<Check>> {
    let base = calib.baseline_total_ms();
    let mut out = Vec::new();
    for row in &calib.rows {
        let total = calib.model_latency(&calib.row_inputs(row), row.profile)?.total_ms;
        let s = calib.baseline_total_ms() / total;
        let reference = base / row.total_ms;
        let rel = (s - reference).abs() / reference;
        out.push(Check::new(
            format!("speedup, {}", row.name),
            rel <= 0.02 && round1(s) == row.speedup,
            format!("{s:.3}x modeled, {reference:.3}x from totals, printed {:.1}x", row.speedup),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pruned_lengths() {
        assert_eq!(pruned_prompt_len(12, 1.0, 142).unwrap(), 3214);
        assert_eq!(pruned_prompt_len(12, 0.7, 142).unwrap(), 2292);
        assert_eq!(pruned_prompt_len(12, 0.3, 0).unwrap(), 922);
    }

    #[test]
    fn shipped_calibration_passes() {
        let c = CostCalibration::shipped();
        for check in table_token_checks(&c).unwrap().into_iter().chain(speedup_checks(&c).unwrap()) {
            assert!(check.passed, "{}", check.line());
        }
    }
}
