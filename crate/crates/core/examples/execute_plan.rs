//! Ground a graph against the built-in action registry and simulate it.

use umrf_forge::engine::{builtin_registry, execute_graph, ground_graph, WorldState, DEFAULT_MAX_STEPS};
use umrf_forge::library::demo_examples;

fn main() -> anyhow::Result<()> {
    let graph = demo_examples()[2].umrf_output.clone();
    let plan = ground_graph(&graph, &builtin_registry()).map_err(|v| anyhow::anyhow!("{v:?}"))?;
    let trace = execute_graph(&plan, WorldState::default(), DEFAULT_MAX_STEPS);
    println!("actions: {}", trace.actions().join(" -> "));
    trace.write_jsonl(std::io::stdout())?;
    println!("final state: {:?}", trace.final_state);
    Ok(())
}
