//! Runs every variant over a handful of samples and prints the report as a
//! markdown table. Models are seeded, not trained, so speculative rows
//! accept few draft tokens here and are slower than the baseline.

use litevlm::corpus::build_corpus;
use litevlm::pipeline::{bench, BenchOptions, ModelBundle, PipelineConfig, VariantSpec};

fn main() -> litevlm::Result<()> {
    let mut config = PipelineConfig::tiny();
    config.max_new = 8;
    let bundle = ModelBundle::init(&config)?;
    let (_, val) = build_corpus(40, 2, 2, 0.1)?;
    let samples: Vec<_> = val
        .queries
        .iter()
        .take(4)
        .map(|q| (val.scene(q.scene_id).expect("scene").clone(), q.clone()))
        .collect();
    let specs = ["baseline", "fastv@0.7", "fastv@0.3", "eagle", "litevlm"]
        .iter()
        .map(|s| s.parse())
        .collect::<litevlm::Result<Vec<VariantSpec>>>()?;
    let report = bench(&samples, &specs, &config, &bundle, &BenchOptions { threads: 1, ..Default::default() })?;
    print!("{}", report.to_markdown());
    for r in &report.rows {
        println!(
            "{:<10} vit {:>12.0} madds, prefill {:>12.0} madds, {:.2} tokens/iteration",
            r.label, r.vit_madds, r.prefill_madds, r.accepted_per_iteration
        );
    }
    Ok(())
}
