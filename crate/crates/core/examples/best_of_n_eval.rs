//! Compares single-sample, best-of-6 and majority-of-6 accuracy for the toy
//! policy before and after a short training run.
//!
//! cargo run --release --example best_of_n_eval -- [steps]

use std::time::Duration;

use sqlforge::eval::{evaluate_policy, EvalMode};
use sqlforge::prompt::{build_prompt, FormatTemplate, WhitespaceTokenizer};
use sqlforge::reward::Judge;
use sqlforge::toy_task::{toy_config, ToyTask};
use sqlforge::train::{run_training, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let dir = tempfile::tempdir()?;
    let task = ToyTask::create(dir.path())?;
    let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());
    let template = FormatTemplate::default();
    let prompts = task
        .records
        .iter()
        .map(|r| build_prompt(r, &template, &WhitespaceTokenizer))
        .collect::<Result<Vec<_>, _>>()?;
    let mut policy = task.policy();

    let report = |label: &str, policy: &mut sqlforge::policy::ToyPolicy| -> Result<(), Box<dyn std::error::Error>> {
        print!("{label:<10}");
        for (mode, t) in [(EvalMode::Single, 1e-6), (EvalMode::BestOfN(6), 0.9), (EvalMode::Majority(6), 0.9)] {
            let r = evaluate_policy(policy, &prompts, &task.records, &judge, mode, t, 64, 11)?;
            print!("  {mode} {:5.1}%", 100.0 * r.accuracy);
        }
        println!();
        Ok(())
    };

    report("untrained", &mut policy)?;
    let config = TrainConfig { max_steps: steps, eval_every: steps + 1, ..toy_config() };
    run_training(config, &task.records, &[], &mut policy, &judge, &template, &WhitespaceTokenizer)?;
    report(&format!("{steps} steps"), &mut policy)?;
    Ok(())
}
