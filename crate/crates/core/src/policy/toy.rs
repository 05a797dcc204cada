//! Tabular softmax policy over a slot grammar:
//!
//! ```text
//! <format> SELECT <col> FROM <table> [WHERE <col> <op> <val>]
//! ```
//!
//! Each prompt gets its own class with independent logits for every slot, so
//! each prompt has a distinct learnable optimum. Token ids are global across
//! slots (`offset[slot] + choice`), and the logits of one class are indexed by
//! token id.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Candidate, GenerateParams, Policy, PolicyError, ScoreTarget, Scored, SnapshotKind, SnapshotOp, StepItem};
use crate::prompt::{parse_tagged_output, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// Exactly the reasoning/answer template.
    Strict,
    /// Both tag pairs, surrounded by prose.
    Soft,
    /// Bare SQL with no tags.
    Bare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Format,
    Column,
    Table,
    Where,
    WhereColumn,
    Op,
    Value,
}

const SLOTS: [Slot; 7] = [Slot::Format, Slot::Column, Slot::Table, Slot::Where, Slot::WhereColumn, Slot::Op, Slot::Value];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGrammar {
    pub formats: Vec<OutputFormat>,
    pub columns: Vec<String>,
    pub tables: Vec<String>,
    pub where_clause: bool,
    pub where_columns: Vec<String>,
    pub ops: Vec<String>,
    pub values: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl ToyGrammar {
    /// Grammar used by the bundled toy task.
    pub fn sql_task() -> Self {
        Self {
            formats: vec![OutputFormat::Strict, OutputFormat::Soft, OutputFormat::Bare],
            columns: strings(&["id", "name", "age", "amount"]),
            tables: strings(&["users", "orders"]),
            where_clause: true,
            where_columns: strings(&["id", "age", "amount"]),
            ops: strings(&[">", "<", "="]),
            values: strings(&["30", "100"]),
        }
    }

    /// Exactly four fixed-length completions.
    pub fn four_way() -> Self {
        Self {
            formats: vec![OutputFormat::Bare],
            columns: strings(&["id", "name"]),
            tables: strings(&["users", "orders"]),
            where_clause: false,
            where_columns: strings(&["id"]),
            ops: strings(&["="]),
            values: strings(&["1"]),
        }
    }

    fn slot_size(&self, slot: Slot) -> usize {
        match slot {
            Slot::Format => self.formats.len(),
            Slot::Column => self.columns.len(),
            Slot::Table => self.tables.len(),
            Slot::Where => {
                if self.where_clause {
                    2
                } else {
                    1
                }
            }
            Slot::WhereColumn => self.where_columns.len(),
            Slot::Op => self.ops.len(),
            Slot::Value => self.values.len(),
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        for slot in SLOTS {
            if self.slot_size(slot) == 0 {
                return Err(PolicyError::InvalidRequest(format!("grammar slot {slot:?} has no choices")));
            }
        }
        Ok(())
    }

    pub fn render_sql(&self, choices: &[usize]) -> String {
        let mut sql = format!("SELECT {} FROM {}", self.columns[choices[1]], self.tables[choices[2]]);
        if choices[3] == 1 {
            sql.push_str(&format!(
                " WHERE {} {} {}",
                self.where_columns[choices[4]], self.ops[choices[5]], self.values[choices[6]]
            ));
        }
        sql
    }
}

static SQL_SHAPE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^SELECT (\S+) FROM (\S+)(?: WHERE (\S+) (\S+) (\S+))?$").unwrap());

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedParams {
    vocab: usize,
    classes: usize,
    #[serde(default)]
    grammar: Option<ToyGrammar>,
    #[serde(default)]
    prompt_refs: Vec<String>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyPolicy {
    grammar: ToyGrammar,
    offsets: Vec<usize>,
    vocab: usize,
    classes: HashMap<String, usize>,
    n_classes: usize,
    current: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
    saved: HashMap<String, Vec<f64>>,
    snapshot_dir: Option<PathBuf>,
}

impl ToyPolicy {
    /// One class per prompt reference; all logits start at zero (uniform).
    pub fn new(grammar: ToyGrammar, prompt_refs: &[String]) -> Result<Self, PolicyError> {
        grammar.validate()?;
        let mut offsets = Vec::with_capacity(SLOTS.len());
        let mut vocab = 0;
        for slot in SLOTS {
            offsets.push(vocab);
            vocab += grammar.slot_size(slot);
        }
        let mut classes = HashMap::new();
        for r in prompt_refs {
            let next = classes.len();
            classes.entry(r.clone()).or_insert(next);
        }
        let n_classes = classes.len();
        let zeros = vec![0.0; vocab * n_classes];
        Ok(Self {
            grammar,
            offsets,
            vocab,
            classes,
            n_classes,
            current: zeros.clone(),
            old: zeros.clone(),
            reference: zeros,
            saved: HashMap::new(),
            snapshot_dir: None,
        })
    }

    /// Persist saved snapshots as JSON files under `dir` as well as in memory.
    pub fn with_snapshot_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.snapshot_dir = Some(dir.into());
        self
    }

    /// Rebuilds a policy from a snapshot file; all three snapshots get its
    /// parameters.
    pub fn from_snapshot_file(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let saved: SavedParams =
            serde_json::from_slice(&fs::read(path)?).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        let grammar = saved.grammar.ok_or_else(|| PolicyError::Protocol("snapshot has no grammar".into()))?;
        let mut policy = Self::new(grammar, &saved.prompt_refs)?;
        if saved.params.len() != policy.num_params() {
            return Err(PolicyError::Protocol("snapshot shape does not match its grammar".into()));
        }
        policy.reset_all(saved.params);
        Ok(policy)
    }

    /// Prompt references in class order.
    pub fn prompt_refs(&self) -> Vec<String> {
        let mut refs = vec![String::new(); self.n_classes];
        for (r, &i) in &self.classes {
            refs[i] = r.clone();
        }
        refs
    }

    pub fn grammar(&self) -> &ToyGrammar {
        &self.grammar
    }

    pub fn num_params(&self) -> usize {
        self.current.len()
    }

    pub fn params(&self, kind: SnapshotKind) -> &[f64] {
        match kind {
            SnapshotKind::Current => &self.current,
            SnapshotKind::Old => &self.old,
            SnapshotKind::Reference => &self.reference,
        }
    }

    pub fn set_params(&mut self, kind: SnapshotKind, params: Vec<f64>) {
        assert_eq!(params.len(), self.current.len(), "parameter vector has the wrong length");
        match kind {
            SnapshotKind::Current => self.current = params,
            SnapshotKind::Old => self.old = params,
            SnapshotKind::Reference => self.reference = params,
        }
    }

    /// Sets all three snapshots to the same parameters.
    pub fn reset_all(&mut self, params: Vec<f64>) {
        self.set_params(SnapshotKind::Current, params.clone());
        self.set_params(SnapshotKind::Old, params.clone());
        self.set_params(SnapshotKind::Reference, params);
    }

    fn class_of(&self, prompt_ref: &str) -> Result<usize, PolicyError> {
        self.classes
            .get(prompt_ref)
            .copied()
            .ok_or_else(|| PolicyError::InvalidRequest(format!("unknown prompt {prompt_ref:?}")))
    }

    fn slot_logits<'a>(&self, params: &'a [f64], class: usize, slot_idx: usize) -> &'a [f64] {
        let start = class * self.vocab + self.offsets[slot_idx];
        &params[start..start + self.grammar.slot_size(SLOTS[slot_idx])]
    }

    /// Slot positions visited by a completion, given its choices so far.
    fn decode(&self, tokens: &[u32]) -> Result<Vec<(usize, usize)>, PolicyError> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut slot_idx = 0;
        for &tok in tokens {
            if slot_idx >= SLOTS.len() {
                return Err(PolicyError::StaleAlignment("sequence longer than grammar allows".into()));
            }
            let offset = self.offsets[slot_idx];
            let size = self.grammar.slot_size(SLOTS[slot_idx]);
            let tok = tok as usize;
            if tok < offset || tok >= offset + size {
                return Err(PolicyError::StaleAlignment(format!("token {tok} invalid for slot {:?}", SLOTS[slot_idx])));
            }
            let choice = tok - offset;
            out.push((slot_idx, choice));
            slot_idx = if SLOTS[slot_idx] == Slot::Where && choice == 0 { SLOTS.len() } else { slot_idx + 1 };
        }
        if slot_idx != SLOTS.len() {
            return Err(PolicyError::StaleAlignment("incomplete sequence".into()));
        }
        Ok(out)
    }

    fn choices(decoded: &[(usize, usize)]) -> [usize; 7] {
        let mut c = [0usize; 7];
        for &(slot, choice) in decoded {
            c[slot] = choice;
        }
        c
    }

    pub fn render(&self, tokens: &[u32]) -> Result<String, PolicyError> {
        let decoded = self.decode(tokens)?;
        let choices = Self::choices(&decoded);
        let sql = self.grammar.render_sql(&choices);
        let reasoning = format!(
            "The answer reads {} from {}{}.",
            self.grammar.columns[choices[1]],
            self.grammar.tables[choices[2]],
            if choices[3] == 1 { " with a filter" } else { "" }
        );
        Ok(match self.grammar.formats[choices[0]] {
            OutputFormat::Strict => format!("<reasoning>{reasoning}</reasoning><answer>{sql}</answer>"),
            OutputFormat::Soft => format!("Let me see. <reasoning>{reasoning}</reasoning>\nSo: <answer>{sql}</answer>"),
            OutputFormat::Bare => sql,
        })
    }

    /// Maps an output text to tokens. Reasoning content is ignored; the format
    /// is taken from the tag structure and the SQL must fit the grammar.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, PolicyError> {
        let tagged = parse_tagged_output(text);
        let (format, sql) = if tagged.strict_match {
            (OutputFormat::Strict, tagged.answer.as_str())
        } else if tagged.soft_match {
            (OutputFormat::Soft, tagged.answer.as_str())
        } else {
            (OutputFormat::Bare, text.trim())
        };
        let miss = || PolicyError::InvalidRequest(format!("text outside the toy grammar: {text:?}"));
        let pos = |xs: &[String], x: &str| xs.iter().position(|s| s == x);

        let caps = SQL_SHAPE.captures(sql).ok_or_else(miss)?;
        let mut choices = vec![
            self.grammar.formats.iter().position(|f| *f == format).ok_or_else(miss)?,
            pos(&self.grammar.columns, &caps[1]).ok_or_else(miss)?,
            pos(&self.grammar.tables, &caps[2]).ok_or_else(miss)?,
        ];
        match caps.get(3) {
            Some(_) if self.grammar.where_clause => {
                choices.push(1);
                choices.push(pos(&self.grammar.where_columns, &caps[3]).ok_or_else(miss)?);
                choices.push(pos(&self.grammar.ops, &caps[4]).ok_or_else(miss)?);
                choices.push(pos(&self.grammar.values, &caps[5]).ok_or_else(miss)?);
            }
            Some(_) => return Err(miss()),
            None => choices.push(0),
        }
        Ok(choices.iter().enumerate().map(|(slot, &c)| (self.offsets[slot] + c) as u32).collect())
    }

    fn logprobs(&self, params: &[f64], class: usize, tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        let decoded = self.decode(tokens)?;
        Ok(decoded
            .iter()
            .map(|&(slot, choice)| log_softmax_at(self.slot_logits(params, class, slot), choice))
            .collect())
    }

    /// Full slot distribution at every position of `tokens` under `kind`.
    pub fn position_distributions(
        &self,
        prompt_ref: &str,
        tokens: &[u32],
        kind: SnapshotKind,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        let class = self.class_of(prompt_ref)?;
        let params = self.params(kind);
        Ok(self
            .decode(tokens)?
            .iter()
            .map(|&(slot, _)| softmax(self.slot_logits(params, class, slot), 1.0))
            .collect())
    }

    /// Every slot distribution of every class under `kind`.
    pub fn all_distributions(&self, kind: SnapshotKind) -> Vec<Vec<f64>> {
        let params = self.params(kind);
        (0..self.n_classes)
            .flat_map(|class| (0..SLOTS.len()).map(move |slot| (class, slot)))
            .map(|(class, slot)| softmax(self.slot_logits(params, class, slot), 1.0))
            .collect()
    }

    /// Gradient of `sum_items sum_t coef_t * logp_current(token_t)` w.r.t. the
    /// current parameters.
    pub fn gradient(&self, items: &[StepItem]) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.current.len()];
        for item in items {
            if item.coefficients.len() != item.tokens.len() {
                return Err(PolicyError::StaleAlignment(format!(
                    "{} coefficients for {} tokens",
                    item.coefficients.len(),
                    item.tokens.len()
                )));
            }
            let class = self.class_of(&item.prompt_ref)?;
            for (&(slot, choice), &coef) in self.decode(&item.tokens)?.iter().zip(&item.coefficients) {
                if coef == 0.0 {
                    continue;
                }
                let probs = softmax(self.slot_logits(&self.current, class, slot), 1.0);
                let start = class * self.vocab + self.offsets[slot];
                for (j, p) in probs.iter().enumerate() {
                    let indicator = if j == choice { 1.0 } else { 0.0 };
                    grad[start + j] += coef * (indicator - p);
                }
            }
        }
        Ok(grad)
    }

    /// The completion with the highest probability for a prompt.
    pub fn greedy(&self, prompt_ref: &str) -> Result<Vec<u32>, PolicyError> {
        let class = self.class_of(prompt_ref)?;
        let mut tokens = Vec::new();
        let mut slot_idx = 0;
        while slot_idx < SLOTS.len() {
            let logits = self.slot_logits(&self.current, class, slot_idx);
            let mut best = 0;
            for (i, z) in logits.iter().enumerate() {
                if *z > logits[best] {
                    best = i;
                }
            }
            tokens.push((self.offsets[slot_idx] + best) as u32);
            slot_idx = if SLOTS[slot_idx] == Slot::Where && best == 0 { SLOTS.len() } else { slot_idx + 1 };
        }
        Ok(tokens)
    }

    /// Every token sequence the grammar admits, for exact expectations.
    pub fn completions(&self) -> Vec<Vec<u32>> {
        let mut done = Vec::new();
        let mut partial = vec![Vec::new()];
        for (slot_idx, slot) in SLOTS.iter().enumerate() {
            let mut next = Vec::new();
            for prefix in partial {
                for choice in 0..self.grammar.slot_size(*slot) {
                    let mut seq: Vec<u32> = prefix.clone();
                    seq.push((self.offsets[slot_idx] + choice) as u32);
                    if *slot == Slot::Where && choice == 0 {
                        done.push(seq);
                    } else {
                        next.push(seq);
                    }
                }
            }
            partial = next;
        }
        done.extend(partial);
        done
    }

    fn snapshot_path(&self, id: &str) -> Option<PathBuf> {
        self.snapshot_dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }
}

impl Policy for ToyPolicy {
    /// The toy grammar is bounded at seven tokens, so `max_new_tokens` is not
    /// consulted.
    fn generate(&mut self, prompt: &Prompt, params: &GenerateParams) -> Result<Vec<Candidate>, PolicyError> {
        if params.group_size == 0 {
            return Err(PolicyError::InvalidRequest("group size must be at least 1".into()));
        }
        if !(params.temperature > 0.0) {
            return Err(PolicyError::InvalidRequest("temperature must be positive".into()));
        }
        let class = self.class_of(&prompt.record_ref)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut out = Vec::with_capacity(params.group_size);
        for _ in 0..params.group_size {
            let mut tokens = Vec::new();
            let mut slot_idx = 0;
            while slot_idx < SLOTS.len() {
                let probs = softmax(self.slot_logits(&self.current, class, slot_idx), params.temperature);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut choice = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        choice = i;
                        break;
                    }
                }
                tokens.push((self.offsets[slot_idx] + choice) as u32);
                slot_idx = if SLOTS[slot_idx] == Slot::Where && choice == 0 { SLOTS.len() } else { slot_idx + 1 };
            }
            let logprobs = self.logprobs(&self.current, class, &tokens)?;
            let text = self.render(&tokens)?;
            out.push(Candidate { tokens, text, logprobs });
        }
        Ok(out)
    }

    fn score(&mut self, prompt: &Prompt, target: &ScoreTarget, snapshot: SnapshotKind) -> Result<Scored, PolicyError> {
        let class = self.class_of(&prompt.record_ref)?;
        let tokens = match target {
            ScoreTarget::Tokens(t) => t.clone(),
            ScoreTarget::Text(text) => self.encode(text)?,
        };
        let logprobs = self.logprobs(self.params(snapshot), class, &tokens)?;
        Ok(Scored { tokens, logprobs })
    }

    fn apply_step(&mut self, items: &[StepItem], learning_rate: f64) -> Result<(), PolicyError> {
        let grad = self.gradient(items)?;
        for (p, g) in self.current.iter_mut().zip(grad) {
            *p += learning_rate * g;
        }
        Ok(())
    }

    fn snapshot(&mut self, op: &SnapshotOp) -> Result<(), PolicyError> {
        match op {
            SnapshotOp::SwapOld => {
                self.old = self.current.clone();
            }
            SnapshotOp::Save { id, from } => {
                let params = self.params(*from).to_vec();
                if let Some(path) = self.snapshot_path(id) {
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    let saved = SavedParams {
                        vocab: self.vocab,
                        classes: self.n_classes,
                        grammar: Some(self.grammar.clone()),
                        prompt_refs: self.prompt_refs(),
                        params: params.clone(),
                    };
                    fs::write(&path, serde_json::to_vec(&saved).map_err(|e| PolicyError::Protocol(e.to_string()))?)?;
                }
                self.saved.insert(id.clone(), params);
            }
            SnapshotOp::Load { id, into } => {
                let params = match self.saved.get(id) {
                    Some(p) => p.clone(),
                    None => {
                        let path = self.snapshot_path(id).filter(|p| p.is_file()).ok_or_else(|| PolicyError::UnknownSnapshot(id.clone()))?;
                        let saved: SavedParams = serde_json::from_slice(&fs::read(path)?)
                            .map_err(|e| PolicyError::Protocol(e.to_string()))?;
                        if saved.vocab != self.vocab || saved.classes != self.n_classes {
                            return Err(PolicyError::UnknownSnapshot(format!("{id} has a different shape")));
                        }
                        saved.params
                    }
                };
                self.set_params(*into, params);
            }
        }
        Ok(())
    }
}
