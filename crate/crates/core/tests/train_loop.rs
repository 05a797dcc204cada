use std::fs;
use std::path::Path;

use sqlforge::policy::{
    Candidate, GenerateParams, Policy, PolicyError, ScoreTarget, Scored, SnapshotKind, SnapshotOp, StepItem, ToyPolicy,
};
use sqlforge::prompt::{DatasetRecord, FormatTemplate, Prompt, WhitespaceTokenizer};
use sqlforge::reward::Judge;
use sqlforge::toy_task::{toy_config, ToyTask};
use sqlforge::train::{
    prepare, run_training, BaselineConfig, MetricRecord, Objective, TrainConfig, TrainError, TrainOutcome, Trainer, Warmup,
};

fn judge(task: &ToyTask, config: &TrainConfig) -> Judge {
    Judge::new(task.registry(), config.timeout(), config.weights)
}

fn pairs(task: &ToyTask) -> Vec<(DatasetRecord, Prompt)> {
    prepare(&task.records, &FormatTemplate::default(), &WhitespaceTokenizer, 3000).unwrap().0
}

fn train(task: &ToyTask, config: TrainConfig, with_dev: bool) -> TrainOutcome {
    let judge = judge(task, &config);
    let mut policy = task.policy();
    let dev = if with_dev { pairs(task) } else { Vec::new() };
    Trainer::new(config, pairs(task), dev, &mut policy, &judge).unwrap().run().unwrap()
}

fn mean_rewards(metrics: &[MetricRecord]) -> Vec<f64> {
    metrics
        .iter()
        .filter_map(|m| match m {
            MetricRecord::Step { mean_reward, .. } => Some(*mean_reward),
            _ => None,
        })
        .collect()
}

fn gain(rewards: &[f64], window: usize) -> f64 {
    let head = rewards[..window].iter().sum::<f64>() / window as f64;
    let tail = rewards[rewards.len() - window..].iter().sum::<f64>() / window as f64;
    tail - head
}

#[test]
fn clipped_objective_improves_reward_in_500_steps() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let out = train(&task, TrainConfig { max_steps: 500, seed: 1, ..toy_config() }, false);
    let r = mean_rewards(&out.metrics);
    assert_eq!(r.len(), 500);
    let g = gain(&r, 10);
    assert!(g >= 1.0, "reward gain {g}");
}

#[test]
fn best_of_group_and_running_baseline_also_learn() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let config = TrainConfig {
        max_steps: 500,
        seed: 2,
        objective: Objective::BestOfGroup,
        baseline: BaselineConfig::Running { decay: 0.9 },
        ..toy_config()
    };
    let out = train(&task, config, false);
    let g = gain(&mean_rewards(&out.metrics), 10);
    assert!(g >= 1.0, "reward gain {g}");
}

#[test]
fn metrics_record_effective_batch_and_beta() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let out = train(&task, TrainConfig { max_steps: 3, stratified: true, ..toy_config() }, false);
    for m in &out.metrics {
        match m {
            MetricRecord::Step { effective_batch, beta, group_max_correct, .. } => {
                assert_eq!(*effective_batch, 16);
                assert_eq!(*beta, 0.001);
                assert!((0.0..=1.0).contains(group_max_correct));
            }
            other => panic!("unexpected record {other:?}"),
        }
    }
}

#[test]
fn flat_accuracy_halts_at_the_patience_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let config = TrainConfig { learning_rate: 1e-12, eval_every: 5, patience: 3, max_steps: 1000, ..toy_config() };
    let out = train(&task, config, true);
    let evals: Vec<u64> = out.metrics.iter().filter_map(|m| if let MetricRecord::Eval { step, .. } = m { Some(*step) } else { None }).collect();
    assert_eq!(evals, vec![5, 10, 15, 20]);
    assert_eq!(out.state.step, 20);
    assert!(out.state.stopped);
    assert!(matches!(out.metrics.last(), Some(MetricRecord::Stop { step: 20, .. })));
    assert_eq!(out.best_checkpoint.as_deref(), Some("step-5"));
    assert!(out.state.evals_since_improvement <= 3);
}

#[test]
fn supervised_warmup_loss_decreases_before_rl() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let config = TrainConfig { warmup: Warmup::Supervised { steps: 12, sample_count: 6 }, learning_rate: 2.0, max_steps: 5, ..toy_config() };
    let out = train(&task, config, false);
    let first_step = out.metrics.iter().position(|m| matches!(m, MetricRecord::Step { .. })).unwrap();
    let losses: Vec<f64> = out.metrics[..first_step]
        .iter()
        .map(|m| match m {
            MetricRecord::Warmup { loss, .. } => *loss,
            other => panic!("non-warm-up record before RL: {other:?}"),
        })
        .collect();
    assert_eq!(losses.len(), 12);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(out.metrics[first_step..].iter().all(|m| !matches!(m, MetricRecord::Warmup { .. })));
}

#[test]
fn identical_seeds_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path().join("task")).unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let config = TrainConfig { max_steps: 60, eval_every: 20, seed: 9, out_dir: Some(out_dir.clone()), ..toy_config() };
        let judge = judge(&task, &config);
        let mut policy = task.policy().with_snapshot_dir(out_dir.join("snapshots"));
        run_training(config, &task.records, &task.records, &mut policy, &judge, &FormatTemplate::default(), &WhitespaceTokenizer).unwrap();
        fs::read(out_dir.join("metrics.jsonl")).unwrap()
    };
    let a = run("a");
    assert!(!a.is_empty());
    assert_eq!(a, run("b"));
    let c = {
        let config = TrainConfig { max_steps: 60, eval_every: 20, seed: 10, ..toy_config() };
        let judge = judge(&task, &config);
        let mut policy = task.policy();
        run_training(config, &task.records, &task.records, &mut policy, &judge, &FormatTemplate::default(), &WhitespaceTokenizer).unwrap()
    };
    assert_ne!(mean_rewards(&c.metrics), {
        let text = String::from_utf8(a).unwrap();
        let recs: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        mean_rewards(&recs)
    });
}

/// Fails the `fail_at`-th step, standing in for a crash mid-run.
struct Crashing {
    inner: ToyPolicy,
    steps: usize,
    fail_at: usize,
}

impl Policy for Crashing {
    fn generate(&mut self, p: &Prompt, g: &GenerateParams) -> Result<Vec<Candidate>, PolicyError> {
        self.inner.generate(p, g)
    }
    fn score(&mut self, p: &Prompt, t: &ScoreTarget, k: SnapshotKind) -> Result<Scored, PolicyError> {
        self.inner.score(p, t, k)
    }
    fn apply_step(&mut self, items: &[StepItem], lr: f64) -> Result<(), PolicyError> {
        self.steps += 1;
        if self.steps == self.fail_at {
            return Err(PolicyError::Io(std::io::Error::other("worker lost")));
        }
        self.inner.apply_step(items, lr)
    }
    fn snapshot(&mut self, op: &SnapshotOp) -> Result<(), PolicyError> {
        self.inner.snapshot(op)
    }
}

fn step_records(metrics: &[MetricRecord], after: u64) -> Vec<String> {
    metrics
        .iter()
        .filter(|m| match m {
            MetricRecord::Step { step, .. } | MetricRecord::Eval { step, .. } | MetricRecord::Stop { step, .. } => *step > after,
            MetricRecord::Warmup { .. } => false,
        })
        .map(|m| serde_json::to_string(m).unwrap())
        .collect()
}

#[test]
fn crash_and_resume_reproduce_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path().join("task")).unwrap();
    let config = |out: &Path| TrainConfig {
        max_steps: 90,
        eval_every: 30,
        seed: 4,
        baseline: BaselineConfig::Running { decay: 0.9 },
        out_dir: Some(out.to_path_buf()),
        ..toy_config()
    };

    let full = {
        let out = dir.path().join("full");
        let cfg = config(&out);
        let judge = judge(&task, &cfg);
        let mut policy = task.policy().with_snapshot_dir(out.join("snapshots"));
        Trainer::new(cfg, pairs(&task), pairs(&task), &mut policy, &judge).unwrap().run().unwrap()
    };

    let crashed_at = 47u64;
    let out = dir.path().join("crash");
    let cfg = config(&out);
    let judge = judge(&task, &cfg);
    let mut crashing = Crashing { inner: task.policy().with_snapshot_dir(out.join("snapshots")), steps: 0, fail_at: crashed_at as usize + 1 };
    let err = Trainer::new(cfg.clone(), pairs(&task), pairs(&task), &mut crashing, &judge).unwrap().run().unwrap_err();
    assert!(matches!(err, TrainError::Policy(PolicyError::Io(_))));

    // a new process: fresh policy object, state from disk only
    let mut policy = task.policy().with_snapshot_dir(out.join("snapshots"));
    let resumed = Trainer::new(cfg, pairs(&task), pairs(&task), &mut policy, &judge)
        .unwrap()
        .resume(&out.join("checkpoints/latest"))
        .unwrap();
    assert_eq!(resumed.state.step, crashed_at);
    let rest = resumed.run().unwrap();

    assert_eq!(step_records(&rest.metrics, crashed_at), step_records(&full.metrics, crashed_at));
    assert_eq!(rest.state, full.state);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path().join("task")).unwrap();
    let out = dir.path().join("run");
    let cfg = TrainConfig { max_steps: 10, eval_every: 5, out_dir: Some(out.clone()), ..toy_config() };
    let judge = judge(&task, &cfg);
    let mut policy = task.policy().with_snapshot_dir(out.join("snapshots"));
    Trainer::new(cfg.clone(), pairs(&task), pairs(&task), &mut policy, &judge).unwrap().run().unwrap();

    let other = TrainConfig { learning_rate: 3.0, ..cfg };
    let mut policy = task.policy().with_snapshot_dir(out.join("snapshots"));
    let r = Trainer::new(other, pairs(&task), pairs(&task), &mut policy, &judge).unwrap().resume(&out.join("checkpoints/latest"));
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn invalid_gold_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let task = ToyTask::create(dir.path()).unwrap();
    let mut records = task.records.clone();
    records[0].gold_sql = "SELECT missing FROM users".into();
    let config = toy_config();
    let judge = judge(&task, &config);
    let mut policy = task.policy();
    let r = run_training(config, &records, &[], &mut policy, &judge, &FormatTemplate::default(), &WhitespaceTokenizer);
    assert!(matches!(r, Err(TrainError::Reward(_))));
}
