//! Execution accuracy under single-sample, best-of-N, and majority-vote
//! inference.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::exec::{normalize_result, ExecStatus, ResultKey};
use crate::policy::{GenerateParams, Policy, PolicyError};
use crate::prompt::{parse_tagged_output, DatasetRecord, Prompt};
use crate::reward::{Judge, RewardError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("{predictions} prediction lists for {records} records")]
    LengthMismatch { predictions: usize, records: usize },
    #[error("record {0} has no candidates")]
    EmptyCandidates(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "n", rename_all = "snake_case")]
pub enum EvalMode {
    Single,
    BestOfN(usize),
    Majority(usize),
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Single => write!(f, "single"),
            EvalMode::BestOfN(n) => write!(f, "best_of_{n}"),
            EvalMode::Majority(n) => write!(f, "majority_{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub record_id: String,
    pub correct: bool,
    /// Execution status of the scored SQL.
    pub status: ExecStatus,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_examples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    fn from_verdicts(mode: EvalMode, verdicts: Vec<Verdict>) -> Self {
        let n_examples = verdicts.len();
        let n_correct = verdicts.iter().filter(|v| v.correct).count();
        Self { mode, n_examples, n_correct, accuracy: n_correct as f64 / n_examples as f64, verdicts }
    }

    /// Counts of incorrect verdicts per execution status.
    pub fn failure_kinds(&self) -> Vec<(ExecStatus, usize)> {
        let mut counts: HashMap<ExecStatus, usize> = HashMap::new();
        for v in self.verdicts.iter().filter(|v| !v.correct) {
            *counts.entry(v.status).or_default() += 1;
        }
        let order = [ExecStatus::Rows, ExecStatus::SyntaxError, ExecStatus::RuntimeError, ExecStatus::Timeout];
        order.iter().filter_map(|s| counts.get(s).map(|c| (*s, *c))).collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>9}", "mode", "examples", "correct", "accuracy");
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8.2}%",
            self.mode.to_string(),
            self.n_examples,
            self.n_correct,
            100.0 * self.accuracy
        );
        for (status, count) in self.failure_kinds() {
            let label = match status {
                ExecStatus::Rows => "wrong result",
                ExecStatus::SyntaxError => "syntax error",
                ExecStatus::RuntimeError => "runtime error",
                ExecStatus::Timeout => "timeout",
            };
            let _ = writeln!(out, "  {label:<14} {count:>8}");
        }
        out
    }
}

/// SQL carried by a model output: the answer tag when the tags are present,
/// otherwise the whole trimmed text.
pub fn extract_sql(output: &str) -> String {
    let tagged = parse_tagged_output(output);
    if tagged.soft_match {
        tagged.answer
    } else {
        output.trim().to_string()
    }
}

fn check_shapes<T>(lists: &[T], records: &[DatasetRecord]) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    if lists.len() != records.len() {
        return Err(EvalError::LengthMismatch { predictions: lists.len(), records: records.len() });
    }
    Ok(())
}

fn verdict(sql: &str, record: &DatasetRecord, judge: &Judge) -> Result<Verdict, EvalError> {
    let (correct, got) = judge.check_sql(sql, record)?;
    Ok(Verdict { record_id: record.id.clone(), correct, status: got.status, sql: sql.to_string() })
}

/// One prediction per record.
pub fn execution_accuracy(predictions: &[String], records: &[DatasetRecord], judge: &Judge) -> Result<EvalReport, EvalError> {
    check_shapes(predictions, records)?;
    let verdicts = predictions
        .par_iter()
        .zip(records)
        .map(|(sql, rec)| verdict(sql, rec, judge))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_verdicts(EvalMode::Single, verdicts))
}

/// A record is correct when any of its candidates matches gold. This selects
/// with access to gold results, so it is an upper bound rather than a decoder.
pub fn best_of_n(candidates: &[Vec<String>], records: &[DatasetRecord], judge: &Judge) -> Result<EvalReport, EvalError> {
    check_shapes(candidates, records)?;
    let n = candidates.iter().map(Vec::len).max().unwrap_or(0);
    let verdicts = candidates
        .par_iter()
        .zip(records)
        .map(|(list, rec)| {
            if list.is_empty() {
                return Err(EvalError::EmptyCandidates(rec.id.clone()));
            }
            let mut first = None;
            for sql in list {
                let v = verdict(sql, rec, judge)?;
                if v.correct {
                    return Ok(v);
                }
                first.get_or_insert(v);
            }
            Ok(first.expect("list is non-empty"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_verdicts(EvalMode::BestOfN(n), verdicts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteKey {
    /// Candidates vote together when their execution results match.
    #[default]
    Result,
    /// Candidates vote together when their whitespace-normalized text matches.
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Bucket {
    Result(ResultKeyHash),
    Text(String),
    Failed(usize),
}

/// `ResultKey` contains floats; hash its debug rendering instead.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ResultKeyHash(String);

impl From<&ResultKey> for ResultKeyHash {
    fn from(k: &ResultKey) -> Self {
        ResultKeyHash(format!("{k:?}"))
    }
}

/// Index of the winning candidate: the largest bucket, ties broken by the
/// bucket whose earliest member was sampled first.
pub fn vote(buckets: &[impl Eq + std::hash::Hash + Clone]) -> usize {
    let mut first_seen: HashMap<_, usize> = HashMap::new();
    let mut counts: HashMap<_, usize> = HashMap::new();
    for (i, b) in buckets.iter().enumerate() {
        first_seen.entry(b.clone()).or_insert(i);
        *counts.entry(b.clone()).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None; // (count, first index)
    for (b, &count) in &counts {
        let first = first_seen[b];
        best = match best {
            Some((c, f)) if c > count || (c == count && f < first) => Some((c, f)),
            _ => Some((count, first)),
        };
    }
    best.map(|(_, f)| f).unwrap_or(0)
}

/// Picks one candidate per record by plurality and scores it.
pub fn majority_vote(
    candidates: &[Vec<String>],
    records: &[DatasetRecord],
    judge: &Judge,
    key: VoteKey,
) -> Result<(Vec<String>, EvalReport), EvalError> {
    check_shapes(candidates, records)?;
    let n = candidates.iter().map(Vec::len).max().unwrap_or(0);
    let picked = candidates
        .par_iter()
        .zip(records)
        .map(|(list, rec)| {
            if list.is_empty() {
                return Err(EvalError::EmptyCandidates(rec.id.clone()));
            }
            let opts = judge.equivalence(rec);
            let mut buckets = Vec::with_capacity(list.len());
            for (i, sql) in list.iter().enumerate() {
                let b = match key {
                    VoteKey::Text => Bucket::Text(sql.split_whitespace().collect::<Vec<_>>().join(" ")),
                    VoteKey::Result => {
                        let got = judge.execute(sql, &rec.db_id)?;
                        match normalize_result(&got, &opts) {
                            Ok(k) => Bucket::Result((&k).into()),
                            Err(_) => Bucket::Failed(i),
                        }
                    }
                };
                buckets.push(b);
            }
            let chosen = list[vote(&buckets)].clone();
            let v = verdict(&chosen, rec, judge)?;
            Ok((chosen, v))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (chosen, verdicts): (Vec<_>, Vec<_>) = picked.into_iter().unzip();
    Ok((chosen, EvalReport::from_verdicts(EvalMode::Majority(n), verdicts)))
}

/// Samples `params.group_size` outputs per prompt and extracts their SQL.
pub fn sample_predictions(
    policy: &mut dyn Policy,
    prompts: &[Prompt],
    params: &GenerateParams,
) -> Result<Vec<Vec<String>>, EvalError> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let params = GenerateParams { seed: params.seed.wrapping_add(i as u64), ..params.clone() };
            Ok(policy.generate(p, &params)?.iter().map(|c| extract_sql(&c.text)).collect())
        })
        .collect()
}

/// Runs `mode` end to end: sample from `policy`, then score.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    prompts: &[Prompt],
    records: &[DatasetRecord],
    judge: &Judge,
    mode: EvalMode,
    temperature: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let n = match mode {
        EvalMode::Single => 1,
        EvalMode::BestOfN(n) | EvalMode::Majority(n) => n,
    };
    let params = GenerateParams { group_size: n, temperature, max_new_tokens, seed };
    let lists = sample_predictions(policy, prompts, &params)?;
    match mode {
        EvalMode::Single => {
            let preds: Vec<String> = lists.into_iter().map(|mut l| l.remove(0)).collect();
            execution_accuracy(&preds, records, judge)
        }
        EvalMode::BestOfN(_) => best_of_n(&lists, records, judge),
        EvalMode::Majority(_) => majority_vote(&lists, records, judge, VoteKey::Result).map(|(_, r)| r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&["A", "A", "B"]), 0);
        assert_eq!(vote(&["B", "A", "A"]), 1);
        assert_eq!(vote(&["A", "A", "B", "B"]), 0);
        assert_eq!(vote(&["B", "A", "A", "B"]), 0);
        assert_eq!(vote(&["C", "A", "B", "B", "A"]), 1);
        assert_eq!(vote(&[1, 2, 3]), 0);
    }

    #[test]
    fn extraction() {
        assert_eq!(extract_sql("<reasoning>x</reasoning><answer> SELECT 1 </answer>"), "SELECT 1");
        assert_eq!(extract_sql("  SELECT 2\n"), "SELECT 2");
    }
}
