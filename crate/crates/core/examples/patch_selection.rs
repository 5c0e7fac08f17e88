//! Trains a small patch selector on a synthetic corpus and shows which
//! views it picks for a few queries.

use litevlm::corpus::build_corpus;
use litevlm::patchsel::{
    evaluate_selector, lexical_match, selector_init, train_patch_selector, PatchSelector, SelectionPolicy,
    SelectorConfig, SelectorTrainConfig,
};

fn main() -> litevlm::Result<()> {
    let (train, val) = build_corpus(200, 2, 1, 0.1)?;
    let cfg = SelectorConfig { d_model: 32, n_heads: 2, d_ff: 64, ..SelectorConfig::default() };
    let mut params = selector_init(&cfg)?;
    let policy = SelectionPolicy::default();
    let tc = SelectorTrainConfig { steps: 300, lr: 3e-3, ..Default::default() };
    let losses = train_patch_selector(&cfg, &mut params, &train.queries, &val.queries, &tc, &policy, |_| {})?;
    println!("loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);

    let selector = PatchSelector::from_params(&cfg, &params)?;
    let eval = evaluate_selector(&selector, &val.queries, &policy)?;
    println!(
        "val macro-F1 {:.3} (explicit {:.3}, model alone {:.3})",
        eval.macro_f1, eval.explicit_macro_f1, eval.model_only_macro_f1
    );

    for raw in ["what is in the front left camera ?", "is it safe to change lanes to the right ?", "any pedestrians ?"] {
        let (lex, explicit) = lexical_match(raw);
        let (scores, mask) = selector.select(raw, &policy)?;
        let fin: Vec<String> = scores.final_scores.iter().map(|s| format!("{s:.2}")).collect();
        println!("{raw:<45} explicit={explicit:<5} lexical={lex:?} final=[{}] patches={:?}", fin.join(" "), mask.slots());
    }
    Ok(())
}
