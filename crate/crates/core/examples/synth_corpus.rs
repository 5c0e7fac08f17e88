//! Generates a small corpus, saves it, reloads it and prints a few queries.

use litevlm::corpus::{build_corpus, Corpus, DEFAULT_VAL_FRACTION};

fn main() -> litevlm::Result<()> {
    let (train, val) = build_corpus(20, 4, 7, DEFAULT_VAL_FRACTION)?;
    let dir = std::env::temp_dir().join("litevlm-example-corpus");
    std::fs::create_dir_all(&dir).expect("temp dir");
    train.save(&dir.join("train.lvcs"), false)?;
    val.save(&dir.join("val.lvcs"), false)?;
    let reloaded = Corpus::load(&dir.join("train.lvcs"))?;
    assert_eq!(reloaded.queries, train.queries);

    println!("train: {} scenes, {} queries", train.scenes.len(), train.queries.len());
    println!("val:   {} scenes {:?}", val.scenes.len(), val.scene_ids());
    let vocab = litevlm::corpus::Vocab::standard();
    for q in train.queries.iter().take(6) {
        let labels: String = q.view_labels.iter().map(|&b| if b { '1' } else { '.' }).collect();
        println!(
            "scene {:>2} [{labels}] explicit={:<5} {:<45} -> {}",
            q.scene_id,
            q.explicit,
            q.raw,
            vocab.decode(&q.answer_ids)
        );
    }
    Ok(())
}
