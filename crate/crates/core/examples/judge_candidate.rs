//! Scores a few hand-written model outputs against the first toy record and
//! prints each reward component.
//!
//! cargo run --example judge_candidate -- ["<reasoning>..</reasoning><answer>SQL</answer>"]

use std::time::Duration;

use sqlforge::reward::{Judge, RewardWeights};
use sqlforge::toy_task::ToyTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let task = ToyTask::create(dir.path())?;
    let record = &task.records[0];
    let judge = Judge::new(task.registry(), Duration::from_secs(5), RewardWeights::default());

    let mut outputs = vec![
        format!("<reasoning>filter users by age</reasoning><answer>{}</answer>", record.gold_sql),
        "<reasoning>wrong column</reasoning><answer>SELECT city FROM users</answer>".to_string(),
        "<reasoning>no answer tag here".to_string(),
        "<reasoning>typo</reasoning><answer>SELEC name FROM users</answer>".to_string(),
        "<answer>SELECT 1</answer>".to_string(),
    ];
    outputs.extend(std::env::args().skip(1));

    println!("question: {}\ngold:     {}\n", record.question, record.gold_sql);
    println!("{:>5} {:>5} {:>5} {:>6} {:>6}  {:<14} output", "r_f", "r_sf", "r_c", "r_l", "total", "status");
    for out in &outputs {
        let tokens = out.split_whitespace().count();
        let r = judge.score(out, tokens, record)?;
        let status = r.exec_status.map(|s| format!("{s:?}")).unwrap_or_else(|| "not run".into());
        println!("{:>5.1} {:>5.1} {:>5.1} {:>6.3} {:>6.3}  {:<14} {out}", r.r_f, r.r_sf, r.r_c, r.r_l, r.total, status);
    }
    Ok(())
}
