//! Four-component execution reward: strict format, soft format, execution
//! correctness, and a length penalty, combined as a weighted sum.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::exec::{
    results_equivalent, DbRegistry, EquivalenceOptions, ExecCache, ExecError, ExecStatus, ExecutionResult,
    Multiplicity,
};
use crate::prompt::{parse_tagged_output, DatasetRecord, TaggedOutput};

pub const FORMAT_REWARD: f64 = 1.0;
pub const SOFT_FORMAT_REWARD: f64 = 0.5;
pub const CORRECTNESS_REWARD: f64 = 2.0;
pub const LENGTH_PENALTY: f64 = -0.5;
pub const DEFAULT_TOKEN_LIMIT: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("gold query for {record} does not execute: {status:?} {message}")]
    GoldInvalid { record: String, status: ExecStatus, message: String },
    #[error("alpha_c = {alpha_c} must exceed |{name}| = {value}")]
    NotDominant { alpha_c: f64, name: &'static str, value: f64 },
    #[error("token limit must be positive")]
    ZeroTokenLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha_f: f64,
    pub alpha_sf: f64,
    pub alpha_c: f64,
    pub alpha_l: f64,
    pub token_limit_k: usize,
}

impl Default for RewardWeights {
    /// Unit weights: the component magnitudes already encode the priorities.
    fn default() -> Self {
        Self { alpha_f: 1.0, alpha_sf: 1.0, alpha_c: 1.0, alpha_l: 1.0, token_limit_k: DEFAULT_TOKEN_LIMIT }
    }
}

impl RewardWeights {
    /// Checks that correctness outweighs every other component, which makes any
    /// correct candidate score strictly above any incorrect one.
    pub fn validate_correctness_dominance(&self) -> Result<(), RewardError> {
        if self.token_limit_k == 0 {
            return Err(RewardError::ZeroTokenLimit);
        }
        for (name, value) in [("alpha_f", self.alpha_f), ("alpha_sf", self.alpha_sf), ("alpha_l", self.alpha_l)] {
            if self.alpha_c <= value.abs() {
                return Err(RewardError::NotDominant { alpha_c: self.alpha_c, name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub r_f: f64,
    pub r_sf: f64,
    pub r_c: f64,
    pub r_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_f: f64,
    pub r_sf: f64,
    pub r_c: f64,
    pub r_l: f64,
    pub total: f64,
    /// Status of the candidate's execution; `None` when the answer was not run.
    pub exec_status: Option<ExecStatus>,
}

impl RewardVector {
    pub fn components(&self) -> RewardComponents {
        RewardComponents { r_f: self.r_f, r_sf: self.r_sf, r_c: self.r_c, r_l: self.r_l }
    }

    pub fn is_correct(&self) -> bool {
        self.r_c > 0.0
    }
}

pub fn format_reward(out: &TaggedOutput) -> f64 {
    if out.strict_match {
        FORMAT_REWARD
    } else {
        0.0
    }
}

/// Stacks with [`format_reward`]: a strict output also earns the soft credit.
pub fn soft_format_reward(out: &TaggedOutput) -> f64 {
    if out.soft_match {
        SOFT_FORMAT_REWARD
    } else {
        0.0
    }
}

pub fn length_reward(candidate_token_count: usize, k: usize) -> f64 {
    assert!(k > 0, "token limit must be positive");
    if candidate_token_count > k {
        LENGTH_PENALTY
    } else {
        0.0
    }
}

pub fn total_reward(c: &RewardComponents, w: &RewardWeights) -> f64 {
    w.alpha_f * c.r_f + w.alpha_sf * c.r_sf + w.alpha_c * c.r_c + w.alpha_l * c.r_l
}

/// Scores candidates against a dataset's gold queries.
///
/// Executions go through a shared cache, so repeated candidates and the gold
/// query for each record run once.
#[derive(Debug)]
pub struct Judge {
    registry: DbRegistry,
    cache: ExecCache,
    pub timeout: Duration,
    pub weights: RewardWeights,
    pub multiplicity: Multiplicity,
}

impl Judge {
    pub fn new(registry: DbRegistry, timeout: Duration, weights: RewardWeights) -> Self {
        Self { registry, cache: ExecCache::new(), timeout, weights, multiplicity: Multiplicity::Bag }
    }

    pub fn registry(&self) -> &DbRegistry {
        &self.registry
    }

    pub fn execute(&self, sql: &str, db_id: &str) -> Result<ExecutionResult, RewardError> {
        let db = self.registry.get(db_id)?;
        Ok(self.cache.execute(sql, &db, self.timeout)?)
    }

    pub fn gold_result(&self, record: &DatasetRecord) -> Result<ExecutionResult, RewardError> {
        let gold = self.execute(&record.gold_sql, &record.db_id)?;
        if !gold.is_rows() {
            return Err(RewardError::GoldInvalid {
                record: record.id.clone(),
                status: gold.status,
                message: gold.message.clone().unwrap_or_default(),
            });
        }
        Ok(gold)
    }

    /// Fails on the first record whose gold query does not produce rows.
    pub fn validate_records(&self, records: &[DatasetRecord]) -> Result<(), RewardError> {
        records.iter().try_for_each(|r| self.gold_result(r).map(|_| ()))
    }

    pub fn equivalence(&self, record: &DatasetRecord) -> EquivalenceOptions {
        EquivalenceOptions { multiplicity: self.multiplicity, ..EquivalenceOptions::for_gold(&record.gold_sql) }
    }

    /// Executes `sql` and compares with gold. Returns the candidate's result too.
    pub fn check_sql(&self, sql: &str, record: &DatasetRecord) -> Result<(bool, ExecutionResult), RewardError> {
        let gold = self.gold_result(record)?;
        let got = self.execute(sql, &record.db_id)?;
        let ok = results_equivalent(&got, &gold, &self.equivalence(record));
        Ok((ok, got))
    }

    /// 2 when the answer reproduces the gold result, 0 otherwise. Infrastructure
    /// failures are errors, not zero reward.
    pub fn correctness_reward(&self, answer_sql: &str, record: &DatasetRecord) -> Result<f64, RewardError> {
        if answer_sql.trim().is_empty() {
            return Ok(0.0);
        }
        let (ok, _) = self.check_sql(answer_sql, record)?;
        Ok(if ok { CORRECTNESS_REWARD } else { 0.0 })
    }

    /// Full reward vector for one model output of `token_count` tokens.
    pub fn score(&self, output: &str, token_count: usize, record: &DatasetRecord) -> Result<RewardVector, RewardError> {
        let tagged = parse_tagged_output(output);
        let r_f = format_reward(&tagged);
        let r_sf = soft_format_reward(&tagged);
        let r_l = length_reward(token_count, self.weights.token_limit_k);

        // untagged output is never executed
        let (r_c, exec_status) = if tagged.soft_match && !tagged.answer.is_empty() {
            let (ok, got) = self.check_sql(&tagged.answer, record)?;
            (if ok { CORRECTNESS_REWARD } else { 0.0 }, Some(got.status))
        } else {
            (0.0, None)
        };

        let components = RewardComponents { r_f, r_sf, r_c, r_l };
        Ok(RewardVector { r_f, r_sf, r_c, r_l, total: total_reward(&components, &self.weights), exec_status })
    }
}
