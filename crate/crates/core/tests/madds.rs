//! Instrumented multiply-add counters against closed forms written out from
//! the architecture.

use litevlm::corpus::{gen_query, gen_scene};
use litevlm::llm::{LanguageModel, LLM_ROLE};
use litevlm::nn::{seeded_init, Meter, ModelConfig};
use litevlm::pipeline::{run_pipeline, ModelBundle, Pipeline, PipelineConfig, Stage, Variant};

fn cfg() -> ModelConfig {
    ModelConfig { d_model: 32, n_heads: 4, n_layers: 3, d_ff: 80, vocab_size: 104, max_seq: 512, seed: 2 }
}

/// Causal prefill over `n` rows: projections, visited keys, MLP.
fn prefill_oracle(c: &ModelConfig, n: u64) -> u64 {
    let (d, ff, l) = (c.d_model as u64, c.d_ff as u64, c.n_layers as u64);
    let visits = n * (n + 1) / 2;
    l * (4 * n * d * d + 2 * d * visits + 2 * n * d * ff)
}

/// One new row against `ctx` keys (itself included), plus the LM head.
fn decode_oracle(c: &ModelConfig, ctx: u64) -> u64 {
    let (d, ff, l, v) = (c.d_model as u64, c.d_ff as u64, c.n_layers as u64, c.vocab_size as u64);
    l * (4 * d * d + 2 * d * ctx + 2 * d * ff) + d * v
}

#[test]
fn prefill_counter_matches_closed_form() {
    let c = cfg();
    let lm = LanguageModel::from_params(&c, &seeded_init(&c, LLM_ROLE).unwrap(), LLM_ROLE).unwrap();
    let mut last = 0.0f64;
    for n in [16usize, 64, 256] {
        let ids: Vec<u32> = (0..n as u32).map(|i| i % 104).collect();
        let meter = Meter::new();
        lm.forward_embeds(&lm.embed_tokens(&ids).unwrap(), &mut lm.new_cache(), &meter).unwrap();
        assert_eq!(meter.madds(), prefill_oracle(&c, n as u64), "n = {n}");
        assert_eq!(meter.madds(), lm.prefill_madds(n as u64));
        let per_row = meter.madds() as f64 / n as f64;
        assert!(per_row > last, "per-row cost grows with n");
        last = per_row;
    }
}

#[test]
fn decode_step_counter_matches_closed_form() {
    let c = cfg();
    let lm = LanguageModel::from_params(&c, &seeded_init(&c, LLM_ROLE).unwrap(), LLM_ROLE).unwrap();
    let mut cache = lm.new_cache();
    lm.forward_embeds(&lm.embed_tokens(&[5; 40]).unwrap(), &mut cache, &Meter::new()).unwrap();
    let meter = Meter::new();
    let h = lm.forward_embeds(&lm.embed_tokens(&[7]).unwrap(), &mut cache, &meter).unwrap();
    lm.greedy(&h, &meter).unwrap();
    assert_eq!(meter.madds(), decode_oracle(&c, 41));
    assert_eq!(meter.madds(), lm.decode_step_madds(41));
}

#[test]
fn pipeline_stages_match_analytic_counts() {
    let mut config = PipelineConfig::tiny().with_variant(Variant::Fastv);
    config.keep_ratio = Some(0.3);
    config.max_new = 5;
    let pipe = Pipeline::new(&config, &ModelBundle::init(&config).unwrap()).unwrap();
    let scene = gen_scene(9, 9);
    let q = gen_query(&scene, 3, 9).unwrap();
    let (_, m) = run_pipeline(&pipe, &scene, &q.raw).unwrap();
    assert_eq!(m.vit_madds, 12 * pipe.analytic_madds(Stage::VitPerPatch));
    let n = m.prefill_tokens as u64;
    assert_eq!(m.prefill_madds, pipe.analytic_madds(Stage::Prefill(n - 1)));
    let decode: u64 = (0..m.decode_iterations as u64).map(|i| pipe.analytic_madds(Stage::DecodeStep(n + i))).sum();
    assert_eq!(m.decode_madds, decode);
}
