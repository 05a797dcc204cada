//! Renders the training prompt for each toy record and drops the ones over a
//! token budget.
//!
//! cargo run --example build_prompts -- [max_tokens]

use sqlforge::prompt::{build_prompt, filter_by_length, FormatTemplate, WhitespaceTokenizer};
use sqlforge::toy_task;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let max: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let template = FormatTemplate::default();
    let records = toy_task::records();
    let prompts = records
        .iter()
        .map(|r| build_prompt(r, &template, &WhitespaceTokenizer))
        .collect::<Result<Vec<_>, _>>()?;

    println!("{}", prompts[0].text);
    for p in &prompts {
        println!("{:>4}  {} tokens", p.record_ref, p.token_count);
    }
    let (kept, dropped) = filter_by_length(prompts, max);
    println!("kept {} of {} at max {max} tokens", kept.len(), kept.len() + dropped);
    Ok(())
}
