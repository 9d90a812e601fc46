//! Score candidate UMRF text against a reference with sentence BLEU.

use umrf_forge::bleu::{sentence_bleu, tokenize, BleuConfig};
use umrf_forge::library::demo_examples;
use umrf_forge::umrf::serialize_graph;

fn main() -> anyhow::Result<()> {
    let reference = serialize_graph(&demo_examples()[0].umrf_output)?;
    let drifted = reference.replace("main_hall", "lobby");
    let candidates = [("exact", reference.as_str()), ("renamed", drifted.as_str()), ("unrelated", "I cannot help with that.")];
    let r = tokenize(&reference);
    for (label, text) in candidates {
        let c = tokenize(text);
        let plain = sentence_bleu(&c, &r, BleuConfig::default())?;
        let smooth = sentence_bleu(&c, &r, BleuConfig { smoothing: true, ..BleuConfig::default() })?;
        println!("{label:<10} bleu={plain:.4} smoothed={smooth:.4}");
    }
    Ok(())
}
