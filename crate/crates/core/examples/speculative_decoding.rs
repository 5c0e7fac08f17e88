//! Fine-tunes a tiny target on rule answers, distills a draft head and
//! compares speculative decoding with plain greedy decoding.

use litevlm::corpus::build_corpus;
use litevlm::corpus::tables::EOS;
use litevlm::llm::{train_language_model, LanguageModel, LmTrainConfig, LLM_ROLE};
use litevlm::nn::seeded_init;
use litevlm::pipeline::train::{distill_sequences, lm_examples, query_prompt};
use litevlm::pipeline::PipelineConfig;
use litevlm::specdec::{
    decode_autoregressive, decode_speculative, distill_draft, draft_init, DecodeMeters, DistillConfig, Draft,
};

fn main() -> litevlm::Result<()> {
    let c = PipelineConfig::tiny();
    let (train, val) = build_corpus(100, 2, 4, 0.1)?;
    let mut llm = seeded_init(&c.llm, LLM_ROLE)?;
    let tc = LmTrainConfig { steps: 150, lr: 3e-3, batch: 8, seed: 4 };
    train_language_model(&c.llm, &mut llm, LLM_ROLE, &lm_examples(&train.queries), &tc)?;
    let target = LanguageModel::from_params(&c.llm, &llm, LLM_ROLE)?;

    let seqs = distill_sequences(&target, &train.queries[..64], c.max_new)?;
    let mut dp = draft_init(c.llm.d_model, c.draft_d_ff, 4);
    let dc = DistillConfig { steps: 300, ..Default::default() };
    distill_draft(&target, &llm, &mut dp, c.llm.n_heads, &seqs, &dc, |_, _| {})?;
    let draft = Draft::from_params(&dp, c.llm.n_heads)?;

    for q in val.queries.iter().take(5) {
        let x = target.embed_tokens(&query_prompt(&q.raw))?;
        let ar_meters = DecodeMeters::default();
        let ar = decode_autoregressive(&target, &x, c.max_new, Some(EOS), &ar_meters)?;
        let sd_meters = DecodeMeters::default();
        let sd = decode_speculative(&target, &draft, &x, 4, c.max_new, Some(EOS), &sd_meters)?;
        assert_eq!(ar.tokens, sd.tokens);
        println!(
            "{:<45} {} tokens: {} target forwards greedy, {} speculative (hist {:?})",
            q.raw,
            ar.tokens.len(),
            ar.stats.iterations,
            sd.stats.iterations,
            sd.stats.accepted_hist
        );
    }
    Ok(())
}
