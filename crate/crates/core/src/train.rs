//! RL training orchestration: sample a group per prompt, score it by
//! execution, turn rewards into per-token coefficients, accumulate over
//! microbatches, and apply one policy step. Periodic evaluation drives
//! checkpoint selection and early stopping.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{evaluate_policy, EvalError, EvalMode};
use crate::grpo::{
    best_of_group_gradient, grpo_step_objective, supervised_warmup_loss, BaselineMode, GrpoError, GrpoHyper, Group,
    KlScope, RunningBaseline, TokenLogProbs,
};
use crate::policy::{
    GenerateParams, Policy, PolicyError, RemotePolicy, ScoreTarget, SnapshotKind, SnapshotOp, StepItem, ToyGrammar,
    ToyPolicy,
};
use crate::prompt::{build_prompt, filter_by_length, DatasetRecord, FormatTemplate, Prompt, PromptError, Tokenizer};
use crate::reward::{Judge, RewardError, RewardVector, RewardWeights};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant,
    /// Linear from `beta_start` at step 0 to zero at `end_step`, then zero.
    LinearDecay { end_step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Clipped,
    BestOfGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineConfig {
    GroupMean,
    Running { decay: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warmup {
    None,
    /// Cross-entropy on `sample_count` gold completions for `steps` steps.
    Supervised { steps: u64, sample_count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Toy,
    Remote { address: String },
    Spawn { command: Vec<String> },
}

impl PolicySpec {
    /// Opens the policy. The toy policy gets one class per prompt reference
    /// and persists snapshots under `snapshot_dir`.
    pub fn open(&self, prompt_refs: &[String], snapshot_dir: Option<&Path>) -> Result<Box<dyn Policy>, TrainError> {
        Ok(match self {
            PolicySpec::Toy => {
                let mut p = ToyPolicy::new(ToyGrammar::sql_task(), prompt_refs)?;
                if let Some(dir) = snapshot_dir {
                    p = p.with_snapshot_dir(dir);
                }
                Box::new(p)
            }
            PolicySpec::Remote { address } => Box::new(RemotePolicy::connect(address.as_str())?),
            PolicySpec::Spawn { command } => {
                let (program, args) =
                    command.split_first().ok_or_else(|| TrainError::Config("spawn command is empty".into()))?;
                let mut cmd = Command::new(program);
                cmd.args(args);
                Box::new(RemotePolicy::spawn(cmd)?)
            }
        })
    }
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)
            .map_err(|e| TrainError::Config(format!("bad checkpoint: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub beta_start: f64,
    pub beta_schedule: BetaSchedule,
    pub kl_scope: KlScope,
    pub learning_rate: f64,
    pub microbatch: usize,
    pub accum_steps: usize,
    pub workers: usize,
    pub eval_every: u64,
    pub patience: u32,
    pub timeout_ms: u64,
    pub max_prompt_tokens: usize,
    pub max_new_tokens: usize,
    pub weights: RewardWeights,
    pub objective: Objective,
    pub baseline: BaselineConfig,
    pub warmup: Warmup,
    pub max_steps: u64,
    pub seed: u64,
    /// Sampling temperature for dev-set evaluation; near zero means greedy.
    pub eval_temperature: f64,
    /// Balance batches across `difficulty` labels instead of uniform shuffling.
    pub stratified: bool,
    /// Steps between resumable checkpoints; defaults to `eval_every`.
    pub checkpoint_every: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub db_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub policy: PolicySpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 6,
            temperature: 0.9,
            epsilon: 0.2,
            beta_start: 0.001,
            beta_schedule: BetaSchedule::Constant,
            kl_scope: KlScope::PerToken,
            learning_rate: 1e-5,
            microbatch: 2,
            accum_steps: 2,
            workers: 4,
            eval_every: 1000,
            patience: 3,
            timeout_ms: 30_000,
            max_prompt_tokens: 3000,
            max_new_tokens: 2000,
            weights: RewardWeights::default(),
            objective: Objective::Clipped,
            baseline: BaselineConfig::GroupMean,
            warmup: Warmup::None,
            max_steps: 34_000,
            seed: 0,
            eval_temperature: 1e-6,
            stratified: false,
            checkpoint_every: None,
            dataset: None,
            dev: None,
            db_root: None,
            out_dir: None,
            template: None,
            policy: PolicySpec::Toy,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.dev, &mut cfg.db_root, &mut cfg.out_dir, &mut cfg.template].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyper().validate()?;
        let positive = [
            ("learning_rate", self.learning_rate > 0.0),
            ("microbatch", self.microbatch > 0),
            ("accum_steps", self.accum_steps > 0),
            ("workers", self.workers > 0),
            ("eval_every", self.eval_every > 0),
            ("patience", self.patience > 0),
            ("timeout_ms", self.timeout_ms > 0),
            ("max_prompt_tokens", self.max_prompt_tokens > 0),
            ("max_new_tokens", self.max_new_tokens > 0),
            ("token_limit_k", self.weights.token_limit_k > 0),
            ("eval_temperature", self.eval_temperature > 0.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if let BaselineConfig::Running { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(TrainError::Config(format!("baseline decay {decay} not in [0,1)")));
            }
        }
        if let BetaSchedule::LinearDecay { end_step: 0 } = self.beta_schedule {
            return Err(TrainError::Config("linear decay end_step must be positive".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> GrpoHyper {
        GrpoHyper { epsilon: self.epsilon, beta: self.beta_start, group_size: self.group_size, temperature: self.temperature }
    }

    /// Groups contributing to one optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.workers * self.microbatch * self.accum_steps
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed RL steps.
    pub step: u64,
    pub baseline: BaselineMode,
    pub beta_current: f64,
    pub best_accuracy: Option<f64>,
    pub evals_since_improvement: u32,
    pub best_checkpoint: Option<String>,
    pub seed: u64,
    /// Prompts drawn so far; positions the shuffled data stream.
    pub cursor: u64,
    pub warmup_done: bool,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            step: 0,
            baseline: match config.baseline {
                BaselineConfig::GroupMean => BaselineMode::GroupMean,
                BaselineConfig::Running { decay } => BaselineMode::Running(RunningBaseline::new(decay)),
            },
            beta_current: config.beta_start,
            best_accuracy: None,
            evals_since_improvement: 0,
            best_checkpoint: None,
            seed: config.seed,
            cursor: 0,
            warmup_done: matches!(config.warmup, Warmup::None),
            stopped: false,
        }
    }
}

pub fn anneal_beta(step: u64, config: &TrainConfig) -> f64 {
    match config.beta_schedule {
        BetaSchedule::Constant => config.beta_start,
        BetaSchedule::LinearDecay { end_step } => {
            if step >= end_step {
                0.0
            } else {
                config.beta_start * (1.0 - step as f64 / end_step as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Stop,
}

/// Updates patience after an evaluation. Returns the decision and whether the
/// accuracy is a new best.
pub fn checkpoint_and_early_stop(state: &mut TrainState, patience: u32, dev_accuracy: f64) -> (Decision, bool) {
    let improved = state.best_accuracy.map_or(true, |best| dev_accuracy > best);
    if improved {
        state.best_accuracy = Some(dev_accuracy);
        state.evals_since_improvement = 0;
    } else {
        state.evals_since_improvement += 1;
    }
    let decision = if state.evals_since_improvement >= patience { Decision::Stop } else { Decision::Continue };
    (decision, improved)
}

/// Sums `k` microbatches of step items, scales by `1 / (microbatch_size * k)`,
/// and applies them as one step.
pub fn accumulate_and_step(
    policy: &mut dyn Policy,
    microbatches: &[Vec<StepItem>],
    accum_steps: usize,
    microbatch_size: usize,
    learning_rate: f64,
) -> Result<(), TrainError> {
    if microbatches.len() != accum_steps {
        return Err(TrainError::ShapeMismatch(format!("expected {accum_steps} microbatches, got {}", microbatches.len())));
    }
    if microbatch_size == 0 {
        return Err(TrainError::ShapeMismatch("microbatch size is zero".into()));
    }
    let scale = 1.0 / (microbatch_size * accum_steps) as f64;
    let mut items = Vec::new();
    for item in microbatches.iter().flatten() {
        if item.tokens.len() != item.coefficients.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} coefficients for {} tokens",
                item.coefficients.len(),
                item.tokens.len()
            )));
        }
        items.push(StepItem { coefficients: item.coefficients.iter().map(|c| c * scale).collect(), ..item.clone() });
    }
    policy.apply_step(&items, learning_rate)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Warmup {
        step: u64,
        loss: f64,
    },
    Step {
        step: u64,
        mean_reward: f64,
        max_reward: f64,
        /// Fraction of groups containing at least one correct candidate.
        group_max_correct: f64,
        /// Fraction of all candidates that are correct.
        correct_rate: f64,
        objective: f64,
        kl: f64,
        beta: f64,
        effective_batch: usize,
    },
    Eval {
        step: u64,
        accuracy: f64,
        n_examples: usize,
        improved: bool,
    },
    Stop {
        step: u64,
        reason: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: String,
    pub snapshot_id: String,
    pub policy: PolicySpec,
    pub state: TrainState,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: Option<String>,
    pub metrics: Vec<MetricRecord>,
    pub state: TrainState,
}

/// Builds prompts and applies the length filter. Returns the admitted pairs
/// and the number dropped.
pub fn prepare(
    records: &[DatasetRecord],
    template: &FormatTemplate,
    tokenizer: &dyn Tokenizer,
    max_prompt_tokens: usize,
) -> Result<(Vec<(DatasetRecord, Prompt)>, usize), TrainError> {
    let prompts = records.iter().map(|r| build_prompt(r, template, tokenizer)).collect::<Result<Vec<_>, _>>()?;
    let (kept, dropped) = filter_by_length(prompts, max_prompt_tokens);
    let pairs = kept
        .into_iter()
        .map(|p| {
            let rec = records.iter().find(|r| r.id == p.record_ref).expect("prompt built from records").clone();
            (rec, p)
        })
        .collect();
    Ok((pairs, dropped))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const SNAPSHOT_LATEST: &str = "latest";
const SNAPSHOT_REFERENCE: &str = "reference";

pub struct Trainer<'a> {
    pub config: TrainConfig,
    policy: &'a mut dyn Policy,
    judge: &'a Judge,
    train: Vec<(DatasetRecord, Prompt)>,
    dev: Vec<(DatasetRecord, Prompt)>,
    pub state: TrainState,
    metrics: Vec<MetricRecord>,
    pool: rayon::ThreadPool,
}

struct ScoredGroup {
    prompt_ref: String,
    tokens: Vec<Vec<u32>>,
    logprobs: Vec<Vec<f64>>,
    rewards: Vec<RewardVector>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        train: Vec<(DatasetRecord, Prompt)>,
        dev: Vec<(DatasetRecord, Prompt)>,
        policy: &'a mut dyn Policy,
        judge: &'a Judge,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let state = TrainState::new(&config);
        Ok(Self { config, policy, judge, train, dev, state, metrics: Vec::new(), pool })
    }

    /// Continues from a checkpoint written by an earlier run with the same config.
    pub fn resume(mut self, checkpoint_dir: &Path) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(checkpoint_dir)?;
        if ck.config_hash != self.config.hash() {
            return Err(TrainError::Config("checkpoint was written with a different config".into()));
        }
        self.policy.snapshot(&SnapshotOp::Load { id: ck.snapshot_id, into: SnapshotKind::Current })?;
        self.policy.snapshot(&SnapshotOp::Load { id: SNAPSHOT_REFERENCE.into(), into: SnapshotKind::Reference })?;
        self.state = ck.state;
        Ok(self)
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    fn log(&mut self, record: MetricRecord) -> Result<(), TrainError> {
        if let Some(dir) = &self.config.out_dir {
            fs::create_dir_all(dir)?;
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("metrics serialize"))?;
        }
        self.metrics.push(record);
        Ok(())
    }

    fn write_checkpoint(&mut self, id: &str, snapshot_id: &str) -> Result<(), TrainError> {
        self.policy.snapshot(&SnapshotOp::Save { id: snapshot_id.to_string(), from: SnapshotKind::Current })?;
        if let Some(dir) = &self.config.out_dir {
            let ck_dir = dir.join("checkpoints").join(id);
            fs::create_dir_all(&ck_dir)?;
            let ck = Checkpoint {
                id: id.to_string(),
                snapshot_id: snapshot_id.to_string(),
                policy: self.config.policy.clone(),
                state: self.state.clone(),
                config_hash: self.config.hash(),
            };
            fs::write(ck_dir.join("checkpoint.json"), serde_json::to_vec_pretty(&ck).expect("checkpoint serializes"))?;
        }
        Ok(())
    }

    /// Runs warm-up (if configured and not yet done) and RL until early stop or
    /// `max_steps`.
    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        if self.state.step == 0 && !self.state.stopped {
            self.policy.snapshot(&SnapshotOp::Save { id: SNAPSHOT_REFERENCE.into(), from: SnapshotKind::Reference })?;
        }
        if !self.state.warmup_done {
            self.warmup()?;
            self.state.warmup_done = true;
            // the reference policy anchors on the warmed-up model
            self.policy.snapshot(&SnapshotOp::Save { id: "warm".into(), from: SnapshotKind::Current })?;
            self.policy.snapshot(&SnapshotOp::Load { id: "warm".into(), into: SnapshotKind::Reference })?;
            self.policy.snapshot(&SnapshotOp::Save { id: SNAPSHOT_REFERENCE.into(), from: SnapshotKind::Reference })?;
        }
        let checkpoint_every = self.config.checkpoint_every.unwrap_or(self.config.eval_every);

        while !self.state.stopped && self.state.step < self.config.max_steps {
            let before = self.state.clone();
            if let Err(e) = self.rl_step() {
                // the failed step may have advanced the data cursor or baseline
                self.state = before;
                let _ = self.write_checkpoint(SNAPSHOT_LATEST, SNAPSHOT_LATEST);
                return Err(e);
            }
            let step = self.state.step;
            if step % self.config.eval_every == 0 && !self.dev.is_empty() {
                self.evaluate()?;
            }
            if step % checkpoint_every == 0 || self.state.stopped {
                self.write_checkpoint(SNAPSHOT_LATEST, SNAPSHOT_LATEST)?;
            }
        }
        Ok(TrainOutcome { best_checkpoint: self.state.best_checkpoint.clone(), metrics: self.metrics, state: self.state })
    }

    fn warmup(&mut self) -> Result<(), TrainError> {
        let Warmup::Supervised { steps, sample_count } = self.config.warmup else {
            return Ok(());
        };
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.state.seed, 0x57A7])));
        order.truncate(sample_count.max(1));
        let targets: Vec<(Prompt, ScoreTarget)> = order
            .iter()
            .map(|&i| {
                let (rec, p) = &self.train[i];
                let text = format!("<reasoning>{}</reasoning><answer>{}</answer>", rec.question, rec.gold_sql);
                (p.clone(), ScoreTarget::Text(text))
            })
            .collect();
        let b = self.config.microbatch;
        for step in 0..steps {
            let mut loss = 0.0;
            let mut scored = Vec::with_capacity(targets.len());
            for (p, t) in &targets {
                let s = self.policy.score(p, t, SnapshotKind::Current)?;
                loss += supervised_warmup_loss(&s.logprobs);
                scored.push((p.record_ref.clone(), s.tokens));
            }
            loss /= targets.len() as f64;
            self.log(MetricRecord::Warmup { step, loss })?;

            let start = (step as usize * b) % scored.len();
            let batch: Vec<StepItem> = (0..b.min(scored.len()))
                .map(|j| {
                    let (prompt_ref, tokens) = &scored[(start + j) % scored.len()];
                    StepItem { prompt_ref: prompt_ref.clone(), coefficients: vec![1.0 / b as f64; tokens.len()], tokens: tokens.clone() }
                })
                .collect();
            self.policy.apply_step(&batch, self.config.learning_rate)?;
        }
        Ok(())
    }

    fn next_prompts(&mut self, count: usize, salt: u64) -> Vec<usize> {
        let n = self.train.len();
        if self.config.stratified {
            let mut labels: Vec<&str> = self.train.iter().map(|(r, _)| r.difficulty.as_deref().unwrap_or("")).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.state.seed, self.state.step, salt, 0x57A7]));
            return (0..count)
                .map(|_| {
                    let label = labels[rng.gen_range(0..labels.len())];
                    let members: Vec<usize> =
                        (0..n).filter(|&i| self.train[i].0.difficulty.as_deref().unwrap_or("") == label).collect();
                    members[rng.gen_range(0..members.len())]
                })
                .collect();
        }
        (0..count)
            .map(|_| {
                let epoch = self.state.cursor / n as u64;
                let pos = (self.state.cursor % n as u64) as usize;
                self.state.cursor += 1;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.state.seed, epoch])));
                order[pos]
            })
            .collect()
    }

    fn sample_group(&mut self, idx: usize, seed: u64) -> Result<ScoredGroup, TrainError> {
        let (record, prompt) = &self.train[idx];
        let params = GenerateParams {
            group_size: self.config.group_size,
            temperature: self.config.temperature,
            max_new_tokens: self.config.max_new_tokens,
            seed,
        };
        let candidates = self.policy.generate(prompt, &params)?;
        let judge = self.judge;
        let rewards = self.pool.install(|| {
            candidates
                .par_iter()
                .map(|c| judge.score(&c.text, c.tokens.len(), record))
                .collect::<Result<Vec<_>, _>>()
        })?;
        Ok(ScoredGroup {
            prompt_ref: prompt.record_ref.clone(),
            tokens: candidates.iter().map(|c| c.tokens.clone()).collect(),
            logprobs: candidates.into_iter().map(|c| c.logprobs).collect(),
            rewards,
        })
    }

    fn rl_step(&mut self) -> Result<(), TrainError> {
        let step = self.state.step;
        self.state.beta_current = anneal_beta(step, &self.config);
        let hyper = GrpoHyper { beta: self.state.beta_current, ..self.config.hyper() };
        self.policy.snapshot(&SnapshotOp::SwapOld)?;

        let per_micro = self.config.workers * self.config.microbatch;
        let mut microbatches = Vec::with_capacity(self.config.accum_steps);
        let (mut reward_sum, mut reward_max, mut n_cands) = (0.0, f64::NEG_INFINITY, 0usize);
        let (mut groups_correct, mut cands_correct, mut n_groups) = (0usize, 0usize, 0usize);
        let (mut objective_sum, mut kl_sum) = (0.0, 0.0);

        for m in 0..self.config.accum_steps {
            let indices = self.next_prompts(per_micro, m as u64);
            let mut items = Vec::new();
            for (j, idx) in indices.into_iter().enumerate() {
                let seed = derive_seed(&[self.state.seed, step, m as u64, j as u64]);
                let sg = self.sample_group(idx, seed)?;
                let prompt = self.train[idx].1.clone();

                let mut lps = Vec::with_capacity(sg.tokens.len());
                for (tokens, sampled) in sg.tokens.iter().zip(&sg.logprobs) {
                    let reference = self.policy.score(&prompt, &ScoreTarget::Tokens(tokens.clone()), SnapshotKind::Reference)?;
                    lps.push(TokenLogProbs::new(sampled.clone(), sampled.clone(), reference.logprobs)?);
                }
                let totals: Vec<f64> = sg.rewards.iter().map(|r| r.total).collect();
                let group = Group::new(sg.prompt_ref.clone(), totals, lps, &mut self.state.baseline)?;
                let step_obj = grpo_step_objective(&group, &hyper, self.config.kl_scope)?;
                let coefficients = match self.config.objective {
                    Objective::Clipped => step_obj.coefficients.clone(),
                    Objective::BestOfGroup => best_of_group_gradient(&group, group.advantages.baseline)?,
                };
                for (tokens, coef) in sg.tokens.iter().zip(coefficients) {
                    items.push(StepItem { prompt_ref: sg.prompt_ref.clone(), tokens: tokens.clone(), coefficients: coef });
                }

                objective_sum += step_obj.objective;
                kl_sum += step_obj.kl;
                n_groups += 1;
                let correct = sg.rewards.iter().filter(|r| r.is_correct()).count();
                cands_correct += correct;
                groups_correct += usize::from(correct > 0);
                for r in &sg.rewards {
                    reward_sum += r.total;
                    reward_max = reward_max.max(r.total);
                    n_cands += 1;
                }
            }
            microbatches.push(items);
        }

        accumulate_and_step(&mut *self.policy, &microbatches, self.config.accum_steps, per_micro, self.config.learning_rate)?;
        self.state.step += 1;
        self.log(MetricRecord::Step {
            step: self.state.step,
            mean_reward: reward_sum / n_cands as f64,
            max_reward: reward_max,
            group_max_correct: groups_correct as f64 / n_groups as f64,
            correct_rate: cands_correct as f64 / n_cands as f64,
            objective: objective_sum / n_groups as f64,
            kl: kl_sum / n_groups as f64,
            beta: self.state.beta_current,
            effective_batch: self.config.effective_batch(),
        })
    }

    fn evaluate(&mut self) -> Result<(), TrainError> {
        let (records, prompts): (Vec<DatasetRecord>, Vec<Prompt>) = self.dev.iter().cloned().unzip();
        let seed = derive_seed(&[self.state.seed, self.state.step, 0xE7A1]);
        let report = evaluate_policy(
            &mut *self.policy,
            &prompts,
            &records,
            self.judge,
            EvalMode::Single,
            self.config.eval_temperature,
            self.config.max_new_tokens,
            seed,
        )?;
        let (decision, improved) = checkpoint_and_early_stop(&mut self.state, self.config.patience, report.accuracy);
        let step = self.state.step;
        if improved {
            let id = format!("step-{step}");
            self.state.best_checkpoint = Some(id.clone());
            self.write_checkpoint(&id, &id)?;
        }
        self.log(MetricRecord::Eval { step, accuracy: report.accuracy, n_examples: report.n_examples, improved })?;
        if decision == Decision::Stop {
            self.state.stopped = true;
            let reason = format!("no improvement in {} evaluations", self.config.patience);
            self.log(MetricRecord::Stop { step, reason })?;
        }
        Ok(())
    }
}

/// Convenience wrapper: prepare prompts, validate gold queries, and train.
pub fn run_training(
    config: TrainConfig,
    dataset: &[DatasetRecord],
    eval_set: &[DatasetRecord],
    policy: &mut dyn Policy,
    judge: &Judge,
    template: &FormatTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<TrainOutcome, TrainError> {
    judge.validate_records(dataset)?;
    judge.validate_records(eval_set)?;
    let (train, _) = prepare(dataset, template, tokenizer, config.max_prompt_tokens)?;
    let (dev, _) = prepare(eval_set, template, tokenizer, config.max_prompt_tokens)?;
    Trainer::new(config, train, dev, policy, judge)?.run()
}
