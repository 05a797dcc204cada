//! Execution-verified corpus construction: keep self-sampled candidates that
//! match gold, and filter externally produced reasoning traces the same way.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::extract_sql;
use crate::exec::normalize_result;
use crate::policy::{GenerateParams, Policy, PolicyError};
use crate::prompt::{parse_tagged_output, DatasetRecord, Prompt};
use crate::reward::{Judge, RewardError};

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("trace {line}: unknown record {prompt_ref}")]
    UnknownRecord { line: usize, prompt_ref: String },
    #[error("{prompts} prompts for {records} records")]
    LengthMismatch { prompts: usize, records: usize },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SelfSampled,
    ExternalTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub prompt_ref: String,
    pub reasoning: String,
    pub sql: String,
    pub source: Source,
    pub verified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CurationStats {
    pub prompts: usize,
    pub generated: usize,
    pub emitted: usize,
    /// Incorrect candidates, plus duplicates when deduplicating.
    pub rejected: usize,
    pub duplicates: usize,
}

impl CurationStats {
    /// Emitted over generated.
    pub fn retention(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.emitted as f64 / self.generated as f64
        }
    }

    pub fn balanced(&self) -> bool {
        self.emitted + self.rejected == self.generated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurateOptions {
    /// Keep one correct sample per distinct result key per prompt.
    pub dedup: bool,
}

/// An externally produced reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prompt_ref: String,
    pub reasoning: String,
    pub sql: String,
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, CurateError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CurateError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[CorpusRecord]) -> Result<(), CurateError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in corpus {
        writeln!(f, "{}", serde_json::to_string(r).expect("corpus serializes"))?;
    }
    f.flush()?;
    Ok(())
}

struct Checked {
    reasoning: String,
    sql: String,
    correct: bool,
    key: Option<String>,
}

fn check(judge: &Judge, record: &DatasetRecord, reasoning: String, sql: String, dedup: bool) -> Result<Checked, CurateError> {
    let (correct, got) = judge.check_sql(&sql, record)?;
    let key = if dedup && correct {
        normalize_result(&got, &judge.equivalence(record)).ok().map(|k| format!("{k:?}"))
    } else {
        None
    };
    Ok(Checked { reasoning, sql, correct, key })
}

fn emit(
    per_record: Vec<(String, Vec<Checked>)>,
    source: Source,
    options: CurateOptions,
) -> (Vec<CorpusRecord>, CurationStats) {
    let mut stats = CurationStats { prompts: per_record.len(), ..Default::default() };
    let mut corpus = Vec::new();
    for (prompt_ref, checked) in per_record {
        let mut seen = HashSet::new();
        for c in checked {
            stats.generated += 1;
            if !c.correct {
                stats.rejected += 1;
                continue;
            }
            if options.dedup && !seen.insert(c.key.clone()) {
                stats.duplicates += 1;
                stats.rejected += 1;
                continue;
            }
            stats.emitted += 1;
            corpus.push(CorpusRecord { prompt_ref: prompt_ref.clone(), reasoning: c.reasoning, sql: c.sql, source, verified: true });
        }
    }
    (corpus, stats)
}

/// Samples `params.group_size` candidates per record and keeps the correct ones
/// with their reasoning text. Output order follows input order.
pub fn curate_positive_samples(
    records: &[DatasetRecord],
    prompts: &[Prompt],
    policy: &mut dyn Policy,
    judge: &Judge,
    params: &GenerateParams,
    options: CurateOptions,
) -> Result<(Vec<CorpusRecord>, CurationStats), CurateError> {
    if records.len() != prompts.len() {
        return Err(CurateError::LengthMismatch { prompts: prompts.len(), records: records.len() });
    }
    let mut sampled = Vec::with_capacity(records.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let p = GenerateParams { seed: params.seed.wrapping_add(i as u64), ..params.clone() };
        sampled.push(policy.generate(prompt, &p)?);
    }
    let per_record = records
        .par_iter()
        .zip(sampled)
        .map(|(rec, candidates)| {
            let checked = candidates
                .into_iter()
                .map(|c| {
                    let tagged = parse_tagged_output(&c.text);
                    check(judge, rec, tagged.reasoning, extract_sql(&c.text), options.dedup)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((rec.id.clone(), checked))
        })
        .collect::<Result<Vec<_>, CurateError>>()?;
    Ok(emit(per_record, Source::SelfSampled, options))
}

/// Keeps the traces whose SQL is execution-equivalent to gold. `prompts`
/// counts distinct records referenced.
pub fn filter_traces(
    traces: &[TraceRecord],
    records: &[DatasetRecord],
    judge: &Judge,
    options: CurateOptions,
) -> Result<(Vec<CorpusRecord>, CurationStats), CurateError> {
    let by_id: HashMap<&str, &DatasetRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    for (i, t) in traces.iter().enumerate() {
        if !by_id.contains_key(t.prompt_ref.as_str()) {
            return Err(CurateError::UnknownRecord { line: i + 1, prompt_ref: t.prompt_ref.clone() });
        }
    }
    // group consecutive traces per prompt, keeping first-appearance order
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&TraceRecord>> = HashMap::new();
    for t in traces {
        let entry = groups.entry(t.prompt_ref.as_str()).or_default();
        if entry.is_empty() {
            order.push(t.prompt_ref.as_str());
        }
        entry.push(t);
    }
    let per_record = order
        .par_iter()
        .map(|id| {
            let rec = by_id[id];
            let checked = groups[id]
                .iter()
                .map(|t| check(judge, rec, t.reasoning.clone(), t.sql.trim().to_string(), options.dedup))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((id.to_string(), checked))
        })
        .collect::<Result<Vec<_>, CurateError>>()?;
    Ok(emit(per_record, Source::ExternalTrace, options))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub passed: usize,
    pub failures: Vec<usize>,
}

impl AuditReport {
    pub fn is_sound(&self) -> bool {
        self.checked == self.passed
    }
}

/// Re-executes every corpus record against gold.
pub fn audit(corpus: &[CorpusRecord], records: &[DatasetRecord], judge: &Judge) -> Result<AuditReport, CurateError> {
    let by_id: HashMap<&str, &DatasetRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let results = corpus
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let rec = by_id
                .get(c.prompt_ref.as_str())
                .ok_or_else(|| CurateError::UnknownRecord { line: i + 1, prompt_ref: c.prompt_ref.clone() })?;
            Ok(c.verified && judge.check_sql(&c.sql, rec)?.0)
        })
        .collect::<Result<Vec<bool>, CurateError>>()?;
    let failures: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i).collect();
    Ok(AuditReport { checked: corpus.len(), passed: corpus.len() - failures.len(), failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_task::ToyTask;
    use std::time::Duration;

    fn trace(id: &str, sql: &str) -> TraceRecord {
        TraceRecord { prompt_ref: id.into(), reasoning: "think".into(), sql: sql.into() }
    }

    #[test]
    fn trace_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let task = ToyTask::create(dir.path()).unwrap();
        let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());
        let traces = vec![
            trace("toy-2", "SELECT id FROM users"),
            trace("toy-2", "SELECT users.id FROM users ORDER BY id DESC"),
            trace("toy-2", "SELECT nope FROM users"),
            trace("toy-5", "SELEC amount"),
            trace("toy-5", "SELECT amount FROM orders WHERE 1 = 1"),
        ];
        let (corpus, stats) = filter_traces(&traces, &task.records, &judge, CurateOptions::default()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(stats, CurationStats { prompts: 2, generated: 5, emitted: 3, rejected: 2, duplicates: 0 });
        assert!(stats.balanced());
        assert!(corpus.iter().all(|c| c.verified && c.source == Source::ExternalTrace));
        assert!(audit(&corpus, &task.records, &judge).unwrap().is_sound());

        let (deduped, stats) = filter_traces(&traces, &task.records, &judge, CurateOptions { dedup: true }).unwrap();
        assert_eq!(deduped.len(), 2);
        assert_eq!(stats.duplicates, 1);
        assert!(stats.balanced());

        let bad = vec![trace("missing", "SELECT 1")];
        assert!(matches!(filter_traces(&bad, &task.records, &judge, Default::default()), Err(CurateError::UnknownRecord { .. })));
    }

    #[test]
    fn audit_flags_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let task = ToyTask::create(dir.path()).unwrap();
        let judge = Judge::new(task.registry(), Duration::from_secs(5), Default::default());
        let corpus = vec![
            CorpusRecord { prompt_ref: "toy-2".into(), reasoning: String::new(), sql: "SELECT id FROM users".into(), source: Source::SelfSampled, verified: true },
            CorpusRecord { prompt_ref: "toy-2".into(), reasoning: String::new(), sql: "SELECT age FROM users".into(), source: Source::SelfSampled, verified: true },
        ];
        let report = audit(&corpus, &task.records, &judge).unwrap();
        assert_eq!(report.failures, vec![1]);
        assert!(!report.is_sound());
    }
}
