//! Wrap the offline mock provider in the on-disk completion cache.

use umrf_forge::library::default_mock_fixture;
use umrf_forge::provider::{CachedProvider, CompletionProvider, CompletionRequest, MockProvider};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let cached = CachedProvider::new(MockProvider::new(default_mock_fixture()), dir.path())?;
    let req = CompletionRequest::new("Scan the area\nUMRF:");
    for attempt in 1..=2 {
        let r = cached.complete(&req)?;
        println!("attempt {attempt}: from_cache={} ({} chars)", r.from_cache, r.text.len());
    }
    println!("provider calls: {}", cached.inner().calls());
    Ok(())
}
