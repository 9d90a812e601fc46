//! Compare prompt text with a reference corpus using the offline embedder
//! and correlate similarity with prompt scores.

use umrf_forge::library::{corpus, default_mock_fixture, example_types, expand_pool, validation_items};
use umrf_forge::provider::MockProvider;
use umrf_forge::search::{design_text, enumerate_prompts, search_designs, SearchOptions};
use umrf_forge::similarity::{similarity_report, similarity_summary, OfflineEmbedder, OFFLINE_PROVIDER_ID};

fn main() -> anyhow::Result<()> {
    let designs = enumerate_prompts(&expand_pool(&example_types()), 1, true)?;
    let mock = MockProvider::new(default_mock_fixture());
    let report = search_designs(&designs, &validation_items(), &mock, &SearchOptions::default())?;
    let prompts: Vec<(String, f64)> = designs
        .iter()
        .zip(&report.averages)
        .map(|(d, s)| (design_text(d), s.average))
        .collect();
    let records = similarity_report(&prompts, &corpus(), &OfflineEmbedder::default())?;
    for r in &records {
        println!("prompt {:>2} max={:.3} mean={:.3} score={:.3}", r.prompt_index, r.max_similarity, r.mean_similarity, r.score);
    }
    // With the echo mock every score is 1.0, so the correlation is undefined
    // and the summary says why.
    println!("{}", serde_json::to_string_pretty(&similarity_summary(&records, OFFLINE_PROVIDER_ID))?);
    Ok(())
}
