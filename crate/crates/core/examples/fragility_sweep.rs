//! Perturb the example text of a prompt and watch the score move.

use umrf_forge::augment::{baseline_score, default_grid, fragility_sweep, score_variance, write_sweep_csv, Augmenter, SweepConfig};
use umrf_forge::library::{default_mock_fixture, demo_examples, validation_items};
use umrf_forge::prompt::{OrderingFlag, PromptDesign};
use umrf_forge::provider::MockProvider;
use umrf_forge::search::SearchOptions;

fn main() -> anyhow::Result<()> {
    let base = PromptDesign::new(demo_examples().into_iter().map(|e| (e, OrderingFlag::LanguageFirst)).collect());
    let items = validation_items();
    let mock = MockProvider::new(default_mock_fixture());
    let opts = SearchOptions::default();
    let aug = Augmenter::bundled();
    println!("baseline: {:.4}", baseline_score(&base, &items, &mock, &opts)?);
    let records = fragility_sweep(&base, &default_grid(), &SweepConfig::default(), &items, &aug, &mock, &opts)?;
    println!("variance: {:.6}", score_variance(&records));
    write_sweep_csv(&records, std::io::stdout())?;
    Ok(())
}
