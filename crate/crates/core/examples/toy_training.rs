//! Trains the toy policy on the seeded shop task with the clipped objective and
//! prints reward and correctness as training proceeds.
//!
//! cargo run --release --example toy_training -- [steps] [learning_rate] [seed]

use std::time::{Duration, Instant};

use sqlforge::prompt::{FormatTemplate, WhitespaceTokenizer};
use sqlforge::reward::Judge;
use sqlforge::toy_task::ToyTask;
use sqlforge::train::{run_training, MetricRecord, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let lr: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(sqlforge::toy_task::TOY_LEARNING_RATE);
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(7);

    let dir = tempfile_dir()?;
    let task = ToyTask::create(&dir)?;
    let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());
    let mut policy = task.policy();
    let config = TrainConfig { max_steps: steps, learning_rate: lr, seed, eval_every: 100, ..sqlforge::toy_task::toy_config() };

    let start = Instant::now();
    let outcome = run_training(config, &task.records, &task.records, &mut policy, &judge, &FormatTemplate::default(), &WhitespaceTokenizer)?;
    for m in &outcome.metrics {
        match m {
            MetricRecord::Step { step, mean_reward, group_max_correct, kl, .. } if step % 25 == 0 || *step == 1 => {
                println!("step {step:>5}  mean reward {mean_reward:6.3}  group-max correct {group_max_correct:5.2}  kl {kl:.4}")
            }
            MetricRecord::Eval { step, accuracy, .. } => println!("eval at {step:>5}  accuracy {:.1}%", 100.0 * accuracy),
            MetricRecord::Stop { step, reason } => println!("stopped at {step}: {reason}"),
            _ => {}
        }
    }
    println!("{} steps in {:.1}s", outcome.state.step, start.elapsed().as_secs_f64());
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("sqlforge-toy-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
