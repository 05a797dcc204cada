use std::error::Error;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sqlforge::curate::{self, CurateOptions};
use sqlforge::eval::{best_of_n, execution_accuracy, extract_sql, majority_vote, sample_predictions, VoteKey};
use sqlforge::exec::{Database, DbRegistry};
use sqlforge::policy::{serve, GenerateParams, Policy, SnapshotKind, SnapshotOp, ToyPolicy};
use sqlforge::prompt::{load_records, DatasetRecord, FormatTemplate, Prompt, WhitespaceTokenizer};
use sqlforge::reward::{Judge, RewardWeights};
use sqlforge::toy_task::{toy_config, ToyTask};
use sqlforge::train::{prepare, Checkpoint, PolicySpec, TrainConfig, Trainer};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "forge", about = "Execution-rewarded RL training and evaluation for Text-to-SQL")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Best6,
    Majority6,
}

#[derive(Clone, Copy, ValueEnum)]
enum Key {
    Result,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dev set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        db_root: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: Mode,
        /// Defaults to near-greedy for single and 0.9 otherwise.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, value_enum, default_value = "result")]
        vote_key: Key,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 2000)]
        max_new_tokens: usize,
    },
    /// Build an execution-verified corpus from self-sampled candidates or
    /// external traces.
    Curate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        db_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Filter these traces instead of sampling.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Policy to sample from; a fresh toy policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        group_size: usize,
        #[arg(long, default_value_t = 0.9)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dedup: bool,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Score one candidate output against a gold query.
    Judge {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        gold: String,
        /// Full model output, tags included.
        #[arg(long)]
        candidate: String,
        /// Read reward weights and k from a training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Write the toy shop database, its records, and a training config.
    ToySetup {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a toy policy over the wire protocol on stdio or a TCP address.
    ServeToy {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, resume } => train(&config, resume.as_deref()),
        Cmd::Eval { checkpoint, dev, db_root, mode, temperature, vote_key, seed, timeout_ms, max_new_tokens } => {
            let records = load_records(&dev)?;
            let judge = Judge::new(DbRegistry::from_root(&db_root), Duration::from_millis(timeout_ms), RewardWeights::default());
            judge.validate_records(&records)?;
            let prompts = build_prompts(&records)?;
            let mut policy = open_checkpoint(&checkpoint, &records)?;
            let (n, default_t) = match mode {
                Mode::Single => (1, 1e-6),
                Mode::Best6 | Mode::Majority6 => (6, 0.9),
            };
            let params = GenerateParams { group_size: n, temperature: temperature.unwrap_or(default_t), max_new_tokens, seed };
            let lists = sample_predictions(&mut *policy, &prompts, &params)?;
            let report = match mode {
                Mode::Single => {
                    let preds: Vec<String> = lists.into_iter().map(|mut l| l.remove(0)).collect();
                    execution_accuracy(&preds, &records, &judge)?
                }
                Mode::Best6 => best_of_n(&lists, &records, &judge)?,
                Mode::Majority6 => {
                    let key = match vote_key {
                        Key::Result => VoteKey::Result,
                        Key::Text => VoteKey::Text,
                    };
                    majority_vote(&lists, &records, &judge, key)?.1
                }
            };
            println!("{}", serde_json::to_string(&report)?);
            print!("{}", report.summary_table());
            Ok(())
        }
        Cmd::Curate { records, db_root, out, traces, checkpoint, group_size, temperature, seed, dedup, timeout_ms } => {
            let records = load_records(&records)?;
            let judge = Judge::new(DbRegistry::from_root(&db_root), Duration::from_millis(timeout_ms), RewardWeights::default());
            judge.validate_records(&records)?;
            let options = CurateOptions { dedup };
            let (corpus, stats) = match traces {
                Some(path) => curate::filter_traces(&curate::load_traces(path)?, &records, &judge, options)?,
                None => {
                    let prompts = build_prompts(&records)?;
                    let mut policy: Box<dyn Policy> = match checkpoint {
                        Some(dir) => open_checkpoint(&dir, &records)?,
                        None => PolicySpec::Toy.open(&ids(&records), None)?,
                    };
                    let params = GenerateParams { group_size, temperature, max_new_tokens: 2000, seed };
                    curate::curate_positive_samples(&records, &prompts, &mut *policy, &judge, &params, options)?
                }
            };
            curate::write_corpus(&out, &corpus)?;
            println!("{}", serde_json::to_string(&json!({ "stats": stats, "retention": stats.retention() }))?);
            Ok(())
        }
        Cmd::Judge { db, gold, candidate, config, timeout_ms } => {
            let weights = match config {
                Some(path) => TrainConfig::from_toml_file(path)?.weights,
                None => RewardWeights::default(),
            };
            let mut registry = DbRegistry::default();
            registry.insert("db", Database::new(&db));
            let judge = Judge::new(registry, Duration::from_millis(timeout_ms), weights);
            let record = DatasetRecord {
                id: "judge".into(),
                db_id: "db".into(),
                ddl: vec!["-".into()],
                knowledge: None,
                question: "-".into(),
                gold_sql: gold,
                difficulty: None,
            };
            judge.validate_records(std::slice::from_ref(&record))?;
            let tokens = candidate.split_whitespace().count();
            let reward = judge.score(&candidate, tokens, &record)?;
            let (equivalent, got) = judge.check_sql(&extract_sql(&candidate), &record)?;
            println!("{}", json!({ "reward": reward, "equivalent": equivalent, "status": got.status }));
            Ok(())
        }
        Cmd::ToySetup { out } => {
            let task = ToyTask::create(&out)?;
            let config = TrainConfig {
                dataset: Some("records.jsonl".into()),
                dev: Some("records.jsonl".into()),
                db_root: Some(".".into()),
                out_dir: Some("run".into()),
                ..toy_config()
            };
            fs::write(out.join("train.toml"), toml::to_string(&config)?)?;
            println!("wrote {} records and {}", task.records.len(), out.join("train.toml").display());
            Ok(())
        }
        Cmd::ServeToy { records, listen, snapshot_dir } => {
            let records = load_records(&records)?;
            let mut policy = ToyPolicy::new(sqlforge::policy::ToyGrammar::sql_task(), &ids(&records))?;
            if let Some(dir) = snapshot_dir {
                policy = policy.with_snapshot_dir(dir);
            }
            match listen {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr)?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    for stream in listener.incoming() {
                        let stream = stream?;
                        serve(&mut policy, stream.try_clone()?, stream)?;
                    }
                }
                None => serve(&mut policy, std::io::stdin().lock(), std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn ids(records: &[DatasetRecord]) -> Vec<String> {
    records.iter().map(|r| r.id.clone()).collect()
}

fn build_prompts(records: &[DatasetRecord]) -> Result<Vec<Prompt>> {
    Ok(records
        .iter()
        .map(|r| sqlforge::prompt::build_prompt(r, &FormatTemplate::default(), &WhitespaceTokenizer))
        .collect::<std::result::Result<_, _>>()?)
}

/// Toy checkpoints live at `<out>/checkpoints/<id>` with parameters in
/// `<out>/snapshots`; remote checkpoints are loaded by snapshot id.
fn open_checkpoint(dir: &Path, records: &[DatasetRecord]) -> Result<Box<dyn Policy>> {
    let ck = Checkpoint::load(dir)?;
    match ck.policy {
        PolicySpec::Toy => {
            let file = dir.join("../../snapshots").join(format!("{}.json", ck.snapshot_id));
            let policy = ToyPolicy::from_snapshot_file(&file)?;
            let known = policy.prompt_refs();
            if let Some(r) = records.iter().find(|r| !known.contains(&r.id)) {
                return Err(format!("record {} was not part of the toy policy's training set", r.id).into());
            }
            Ok(Box::new(policy))
        }
        spec => {
            let mut policy = spec.open(&ids(records), None)?;
            policy.snapshot(&SnapshotOp::Load { id: ck.snapshot_id, into: SnapshotKind::Current })?;
            Ok(policy)
        }
    }
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let config = TrainConfig::from_toml_file(config_path)?;
    let need = |p: &Option<PathBuf>, name: &str| p.clone().ok_or_else(|| format!("config is missing `{name}`"));
    let dataset = load_records(need(&config.dataset, "dataset")?)?;
    let dev = match &config.dev {
        Some(p) => load_records(p)?,
        None => Vec::new(),
    };
    let db_root = need(&config.db_root, "db_root")?;
    let out_dir = need(&config.out_dir, "out_dir")?;
    let template = match &config.template {
        Some(p) => FormatTemplate::from_file(p)?,
        None => FormatTemplate::default(),
    };

    let judge = Judge::new(DbRegistry::from_root(&db_root), config.timeout(), config.weights);
    judge.validate_records(&dataset)?;
    judge.validate_records(&dev)?;
    let (train, dropped) = prepare(&dataset, &template, &WhitespaceTokenizer, config.max_prompt_tokens)?;
    let (dev, _) = prepare(&dev, &template, &WhitespaceTokenizer, config.max_prompt_tokens)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} prompts over {} tokens", config.max_prompt_tokens);
    }

    let mut refs = ids(&dataset);
    refs.extend(dev.iter().map(|(r, _)| r.id.clone()));
    let mut policy = config.policy.open(&refs, Some(&out_dir.join("snapshots")))?;
    let mut trainer = Trainer::new(config, train, dev, &mut *policy, &judge)?;
    if let Some(dir) = resume {
        trainer = trainer.resume(dir)?;
    }
    let outcome = trainer.run()?;
    println!(
        "{}",
        json!({
            "steps": outcome.state.step,
            "best_checkpoint": outcome.best_checkpoint.map(|id| out_dir.join("checkpoints").join(id)),
            "best_accuracy": outcome.state.best_accuracy,
            "metrics": out_dir.join("metrics.jsonl"),
        })
    );
    Ok(())
}
