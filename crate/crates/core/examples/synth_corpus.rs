//! Render the sprite corpus to disk and summarize what was drawn.
//!
//! cargo run --example synth_corpus -- [out_dir] [seed]

use std::collections::BTreeMap;

use concept_em::scene::{generate_corpus, save_corpus, CorpusSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "corpus".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let corpus = generate_corpus(&CorpusSpec::default(), seed)?;
    save_corpus(&corpus, std::path::Path::new(&out))?;

    let mut per_count: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &corpus.train {
        *per_count.entry(s.caption.positions.len()).or_default() += 1;
    }
    println!("{} train, {} held-out scenes in {out}", corpus.train.len(), corpus.heldout.len());
    for (n, c) in per_count {
        println!("  {n} labelled regions: {c} scenes");
    }
    for s in corpus.heldout.iter().take(3) {
        println!("  {} `{}`", s.sample_id, s.caption.text());
    }
    Ok(())
}
