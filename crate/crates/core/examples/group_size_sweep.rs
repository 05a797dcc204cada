//! Sweeps the group size over {4, 6, 8} on the toy task and reports, per
//! setting, the mean reward over the last 50 steps and the first step at
//! which the trailing 20-step group-max correctness reaches 0.9.
//!
//! cargo run --release --example group_size_sweep -- [steps] [seeds]

use std::time::Duration;

use sqlforge::prompt::{FormatTemplate, WhitespaceTokenizer};
use sqlforge::reward::Judge;
use sqlforge::toy_task::{toy_config, ToyTask};
use sqlforge::train::{run_training, MetricRecord, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let dir = tempfile::tempdir()?;
    let task = ToyTask::create(dir.path())?;
    let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());

    println!("{:>3} {:>5} {:>12} {:>14}", "G", "seed", "tail reward", "steps to 0.9");
    for g in [4, 6, 8] {
        for seed in 0..seeds {
            let config = TrainConfig { group_size: g, max_steps: steps, seed, eval_every: steps + 1, ..toy_config() };
            let mut policy = task.policy();
            let out = run_training(config, &task.records, &[], &mut policy, &judge, &FormatTemplate::default(), &WhitespaceTokenizer)?;
            let (rewards, correct): (Vec<f64>, Vec<f64>) = out
                .metrics
                .iter()
                .filter_map(|m| match m {
                    MetricRecord::Step { mean_reward, group_max_correct, .. } => Some((*mean_reward, *group_max_correct)),
                    _ => None,
                })
                .unzip();
            let tail = &rewards[rewards.len().saturating_sub(50)..];
            let reached = correct
                .windows(20)
                .position(|w| w.iter().sum::<f64>() / 20.0 >= 0.9)
                .map(|i| (i + 20).to_string())
                .unwrap_or_else(|| "-".into());
            println!("{g:>3} {seed:>5} {:>12.3} {reached:>14}", tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }
    Ok(())
}
