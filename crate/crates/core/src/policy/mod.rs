//! Policy contract used by the trainer, evaluator, and curator.
//!
//! A policy samples candidate groups, scores token sequences under one of
//! three parameter snapshots, applies coefficient-weighted gradient steps, and
//! manages snapshots. [`toy::ToyPolicy`] implements it in-process;
//! [`wire::RemotePolicy`] forwards it over the framed `v1` protocol.

pub mod toy;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::prompt::Prompt;

pub use toy::{ToyGrammar, ToyPolicy};
pub use wire::{serve, PolicyRequest, PolicyResponse, RemotePolicy};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown snapshot {0:?}")]
    UnknownSnapshot(String),
    #[error("step does not match scored candidates: {0}")]
    StaleAlignment(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    Current,
    Old,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub text: String,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ScoreTarget {
    Tokens(Vec<u32>),
    /// Text is tokenized by the policy; the response carries the tokens.
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

/// Per-token ascent coefficients for one previously scored sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepItem {
    pub prompt_ref: String,
    pub tokens: Vec<u32>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SnapshotOp {
    Save { id: String, from: SnapshotKind },
    Load { id: String, into: SnapshotKind },
    /// `old <- current`.
    SwapOld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub group_size: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

pub trait Policy: Send {
    /// Draws `group_size` i.i.d. candidates from the current snapshot.
    fn generate(&mut self, prompt: &Prompt, params: &GenerateParams) -> Result<Vec<Candidate>, PolicyError>;

    fn score(&mut self, prompt: &Prompt, target: &ScoreTarget, snapshot: SnapshotKind) -> Result<Scored, PolicyError>;

    /// `theta += learning_rate * sum coef_t * grad(logp_current(token_t))`.
    fn apply_step(&mut self, items: &[StepItem], learning_rate: f64) -> Result<(), PolicyError>;

    fn snapshot(&mut self, op: &SnapshotOp) -> Result<(), PolicyError>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn generate(&mut self, prompt: &Prompt, params: &GenerateParams) -> Result<Vec<Candidate>, PolicyError> {
        (**self).generate(prompt, params)
    }

    fn score(&mut self, prompt: &Prompt, target: &ScoreTarget, snapshot: SnapshotKind) -> Result<Scored, PolicyError> {
        (**self).score(prompt, target, snapshot)
    }

    fn apply_step(&mut self, items: &[StepItem], learning_rate: f64) -> Result<(), PolicyError> {
        (**self).apply_step(items, learning_rate)
    }

    fn snapshot(&mut self, op: &SnapshotOp) -> Result<(), PolicyError> {
        (**self).snapshot(op)
    }
}
