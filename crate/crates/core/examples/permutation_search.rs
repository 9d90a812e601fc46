//! Evaluate every ordered pair from the bundled example pool on the
//! validation set with the echo mock, and write the reports.

use umrf_forge::library::{default_mock_fixture, example_types, expand_pool, validation_items};
use umrf_forge::provider::MockProvider;
use umrf_forge::search::{exhaustive_search, SearchOptions};

fn main() -> anyhow::Result<()> {
    let pool = expand_pool(&example_types());
    let items = validation_items();
    let mock = MockProvider::new(default_mock_fixture());
    let report = exhaustive_search(&pool, 2, &items, &mock, &SearchOptions::default())?;
    println!("{} prompts, {} records, {} provider calls", report.total_prompts, report.records.len(), mock.calls());
    for s in report.top(5) {
        println!("prompt {:>3} {:<8} {:.4}", s.prompt_index, s.structure.to_string(), s.average);
    }
    let dir = tempfile::tempdir()?;
    report.write_to_dir(dir.path(), 10)?;
    println!("{}", std::fs::read_to_string(dir.path().join("summary.json"))?);
    Ok(())
}
