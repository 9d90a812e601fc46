//! Call a completions endpoint. Needs `UMRF_FORGE_API_KEY`; the base URL can
//! be changed with `UMRF_FORGE_BASE_URL`.

use umrf_forge::library::demo_examples;
use umrf_forge::prompt::{build_prompt, OrderingFlag, PromptDesign};
use umrf_forge::provider::{CompletionProvider, CompletionRequest, HttpProvider, ProviderConfig, API_KEY_ENV};

fn main() -> anyhow::Result<()> {
    let cfg = ProviderConfig::from_env();
    if cfg.credential.is_none() {
        println!("set {API_KEY_ENV} to run this example");
        return Ok(());
    }
    println!("config: {cfg:?}");
    let provider = HttpProvider::new(cfg)?;
    let ex = demo_examples();
    let design = PromptDesign::new(ex.iter().cloned().map(|e| (e, OrderingFlag::LanguageFirst)).collect());
    let prompt = build_prompt(&design.with_query(ex[2].query_form()))?;
    let result = provider.complete(&CompletionRequest::new(prompt.text))?;
    println!("retries={} latency={:.2}s\n{}", result.retries, result.latency, result.text);
    Ok(())
}
