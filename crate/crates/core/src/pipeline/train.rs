//! Builds training data for the trainable roles from a corpus.

use super::run::{build_prompt, critical_boxes, Pipeline, StageMetrics};
use crate::corpus::tables::{EOS, SEP};
use crate::corpus::{QuerySample, SceneSpec, Vocab};
use crate::error::Result;
use crate::llm::{LanguageModel, LmExample};
use crate::nn::Meter;
use crate::specdec::{teacher_sequence, DistillSequence};
use crate::toksel::{attention_importance, forced_keep_flags, synth_labels, TokselExample};

/// Query text plus separator, the prompt the answers follow.
pub fn query_prompt(raw: &str) -> Vec<u32> {
    let mut ids = Vocab::standard().encode(raw);
    ids.push(SEP);
    ids
}

/// Text-only examples teaching the target to emit the rule answers.
pub fn lm_examples(queries: &[QuerySample]) -> Vec<LmExample> {
    queries
        .iter()
        .map(|q| LmExample { prompt: query_prompt(&q.raw), continuation: q.answer_ids.clone() })
        .collect()
}

/// Teacher sequences for draft distillation, one per query.
pub fn distill_sequences(target: &LanguageModel, queries: &[QuerySample], max_new: usize) -> Result<Vec<DistillSequence>> {
    queries
        .iter()
        .map(|q| teacher_sequence(target, &query_prompt(&q.raw), max_new, Some(EOS)))
        .collect()
}

/// Full-resolution prompts labelled with blended attention and
/// critical-object flags. Every patch is encoded regardless of the
/// pipeline's variant.
pub fn toksel_examples(pipe: &Pipeline, samples: &[(SceneSpec, QuerySample)], alpha: f32) -> Result<Vec<TokselExample>> {
    let mut full = pipe.clone();
    full.selector = None;
    samples
        .iter()
        .map(|(scene, q)| {
            let mut m = StageMetrics::default();
            let (prompt, origin, _) = build_prompt(&full, scene, &q.raw, &mut m)?;
            let span = 0..m.visual_total;
            let positioned = full.llm.with_positions(&prompt, 0)?;
            let attn = attention_importance(&positioned, full.llm.first_layer(), span.clone(), &Meter::new())?;
            let flags = forced_keep_flags(&origin, &critical_boxes(scene))?;
            Ok(TokselExample { embeddings: positioned, labels: synth_labels(&attn.scores, &flags, alpha)?, span })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_query, gen_scene};
    use crate::pipeline::{ModelBundle, PipelineConfig};

    #[test]
    fn examples_have_expected_shapes() {
        let c = PipelineConfig::tiny();
        let pipe = Pipeline::new(&c, &ModelBundle::init(&c).unwrap()).unwrap();
        let scene = gen_scene(1, 2);
        let q = gen_query(&scene, 0, 2).unwrap();
        let lm = lm_examples(std::slice::from_ref(&q));
        assert_eq!(*lm[0].prompt.last().unwrap(), SEP);
        assert_eq!(*lm[0].continuation.last().unwrap(), EOS);

        let ex = toksel_examples(&pipe, &[(scene, q.clone())], 0.5).unwrap();
        assert_eq!(ex[0].span, 0..3072);
        assert_eq!(ex[0].labels.len(), 3072);
        assert!(ex[0].labels.iter().all(|l| (0.0..=1.0).contains(l)));

        let seqs = distill_sequences(&pipe.llm, &[q], 5).unwrap();
        assert_eq!(seqs[0].inputs.rows(), seqs[0].next.len());
    }
}
