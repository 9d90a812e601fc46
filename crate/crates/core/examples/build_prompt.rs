//! Assemble a few-shot prompt from two bundled examples in different orders.

use umrf_forge::command::parse_command;
use umrf_forge::library::demo_examples;
use umrf_forge::prompt::{build_prompt, OrderingFlag, PromptDesign};

fn main() -> anyhow::Result<()> {
    let ex = demo_examples();
    let design = PromptDesign::new(vec![
        (ex[0].clone(), OrderingFlag::VisualFirst),
        (ex[4].clone(), OrderingFlag::LanguageFirst),
    ]);
    println!("structure: {}", design.structure());
    let query = parse_command("Drive to the charging bay [x=2; y=8.5; yaw=0]")?;
    let prompt = build_prompt(&design.with_query(query))?;
    println!("~{} tokens\n---\n{}", prompt.estimated_tokens, prompt.text);
    Ok(())
}
