//! The prompt registry: templates, their slots, rendering, and parsing a
//! research plan out of a model reply.
//!
//! cargo run --example prompt_registry

use hcc::gateway::{
    extract_code_block, parse_research_plan, placeholders, render_prompt, with_metric_convention, Bindings,
    MultipleBlocksPolicy, PromptName,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in PromptName::ALL {
        println!("{name:<10} {:?}", placeholders(name));
    }

    let bindings: Bindings = placeholders(PromptName::Draft)
        .into_iter()
        .map(|slot| (slot, format!("<{slot}>")))
        .collect();
    let prompt = with_metric_convention(render_prompt(PromptName::Draft, &bindings)?);
    println!("\n--- rendered draft prompt ---\n{prompt}");

    let reply = r#"Sure, here is the plan.
```json
{
  "feature engineering": {"1": "add ratio features", "2": "target encoding"},
  "model choice": {"1": "LightGBM"},
  "validation": {"1": "grouped k-fold",},
}
```"#;
    let plan = parse_research_plan(reply)?;
    println!("m = {}, q = {:?}", plan.m(), plan.q());
    println!("{}", plan.to_json());

    let code = extract_code_block("text\n```python\nprint(1)\n```\n```python\nprint(2)\n```", MultipleBlocksPolicy::FirstWins)?;
    println!("first block: {code}");
    Ok(())
}
