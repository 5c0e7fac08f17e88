//! Scores visual tokens, forces objects to survive and prunes at several
//! keep ratios.

use litevlm::corpus::{gen_query, gen_scene};
use litevlm::nn::Meter;
use litevlm::pipeline::run::build_prompt;
use litevlm::pipeline::{critical_boxes, ModelBundle, Pipeline, PipelineConfig, StageMetrics, Variant};
use litevlm::toksel::{attention_importance, forced_keep_flags, prune};

fn main() -> litevlm::Result<()> {
    let config = PipelineConfig::tiny().with_variant(Variant::Baseline);
    let pipe = Pipeline::new(&config, &ModelBundle::init(&config)?)?;
    let scene = gen_scene(5, 11);
    let q = gen_query(&scene, 13, 11)?;
    let mut m = StageMetrics::default();
    let (prompt, origin, _) = build_prompt(&pipe, &scene, &q.raw, &mut m)?;
    let span = 0..m.visual_total;

    let positioned = pipe.llm.with_positions(&prompt, 0)?;
    let scores = attention_importance(&positioned, pipe.llm.first_layer(), span.clone(), &Meter::new())?;
    let forced = forced_keep_flags(&origin, &critical_boxes(&scene))?;
    let n_forced = forced.iter().filter(|&&f| f).count();
    println!("query {:?}: {} visual + {} text tokens, {n_forced} forced", q.raw, m.visual_total, m.text_tokens);

    for r in [1.0, 0.9, 0.7, 0.3, 0.05] {
        let p = prune(&prompt, span.clone(), &scores, &forced, r)?;
        println!(
            "r={r:<4} kept {:>4} visual ({:.3} effective), prefill {} tokens",
            p.visual_kept,
            p.effective_ratio,
            p.index_map.len()
        );
    }
    Ok(())
}
