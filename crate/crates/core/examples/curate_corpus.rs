//! Builds a verified reasoning corpus two ways: by sampling the toy policy and
//! keeping correct answers, and by filtering a pile of external traces. Both
//! outputs are re-audited against gold.
//!
//! cargo run --example curate_corpus

use std::time::Duration;

use sqlforge::curate::{audit, curate_positive_samples, filter_traces, CurateOptions, TraceRecord};
use sqlforge::policy::GenerateParams;
use sqlforge::prompt::{build_prompt, FormatTemplate, WhitespaceTokenizer};
use sqlforge::reward::Judge;
use sqlforge::toy_task::ToyTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let task = ToyTask::create(dir.path())?;
    let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());
    let prompts = task
        .records
        .iter()
        .map(|r| build_prompt(r, &FormatTemplate::default(), &WhitespaceTokenizer))
        .collect::<Result<Vec<_>, _>>()?;

    // untrained, so a wide group is needed to hit any correct answers
    let mut policy = task.policy();
    let params = GenerateParams { group_size: 64, temperature: 1.0, max_new_tokens: 64, seed: 3 };
    let (sampled, stats) = curate_positive_samples(&task.records, &prompts, &mut policy, &judge, &params, CurateOptions { dedup: true })?;
    println!("self-sampled: {stats:?}  retention {:.2}", stats.retention());

    // half the traces carry gold, half a plausible wrong query
    let traces: Vec<TraceRecord> = task
        .records
        .iter()
        .flat_map(|r| {
            [
                TraceRecord { prompt_ref: r.id.clone(), reasoning: "worked it out".into(), sql: r.gold_sql.clone() },
                TraceRecord { prompt_ref: r.id.clone(), reasoning: "guessed".into(), sql: "SELECT name FROM users".into() },
            ]
        })
        .collect();
    let (filtered, stats) = filter_traces(&traces, &task.records, &judge, CurateOptions::default())?;
    println!("traces:       {stats:?}  retention {:.2}", stats.retention());

    for (label, corpus) in [("self-sampled", &sampled), ("traces", &filtered)] {
        let a = audit(corpus, &task.records, &judge)?;
        println!("audit {label}: {}/{} pass", a.passed, a.checked);
    }
    if let Some(r) = filtered.first() {
        println!("\n{}", serde_json::to_string_pretty(r)?);
    }
    Ok(())
}
