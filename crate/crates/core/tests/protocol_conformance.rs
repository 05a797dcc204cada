//! Replays the recorded protocol exchanges against a fresh toy policy and
//! compares the response byte stream frame for frame.
//!
//! Set `SQLFORGE_RECORD_FIXTURES=1` to rewrite the fixture file from the
//! scenario below.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sqlforge::policy::wire::{encode, read_frame, write_frame};
use sqlforge::policy::{serve, PolicyRequest, ScoreTarget, SnapshotKind, SnapshotOp, StepItem, ToyGrammar, ToyPolicy};
use sqlforge::prompt::Prompt;

/// How strictly a non-toy implementation must reproduce the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AdapterMatch {
    /// Identical payload bytes.
    Exact,
    /// Same `kind`, and for errors the same `code`.
    Code,
    /// Same `kind` and candidate count, token and log-prob lists aligned.
    Shape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Exchange {
    name: String,
    request: String,
    response: String,
    adapter_match: AdapterMatch,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/protocol/v1_toy.jsonl")
}

fn toy() -> ToyPolicy {
    ToyPolicy::new(ToyGrammar::sql_task(), &["p0".to_string(), "p1".to_string()]).unwrap()
}

fn prompt(r: &str) -> Prompt {
    Prompt { text: format!("question for {r}"), token_count: 3, record_ref: r.into() }
}

fn req(m: &PolicyRequest) -> String {
    String::from_utf8(encode(m)).unwrap()
}

/// Requests in order, with the match level expected of adapters.
fn scenario() -> Vec<(&'static str, String, AdapterMatch)> {
    let strict = "<reasoning>The answer reads name from users.</reasoning><answer>SELECT name FROM users</answer>";
    let strict_tokens = toy().encode(strict).unwrap();
    vec![
        (
            "generate_g3",
            req(&PolicyRequest::Generate { prompt: prompt("p0"), group_size: 3, temperature: 0.9, max_new_tokens: 64, seed: 7 }),
            AdapterMatch::Shape,
        ),
        (
            "score_text_current",
            req(&PolicyRequest::Score { prompt: prompt("p0"), target: ScoreTarget::Text(strict.into()), snapshot: SnapshotKind::Current }),
            AdapterMatch::Shape,
        ),
        (
            "save_reference",
            req(&PolicyRequest::Snapshot { op: SnapshotOp::Save { id: "ref0".into(), from: SnapshotKind::Current } }),
            AdapterMatch::Exact,
        ),
        (
            "step",
            req(&PolicyRequest::Step {
                items: vec![StepItem { prompt_ref: "p0".into(), tokens: strict_tokens.clone(), coefficients: vec![0.5; strict_tokens.len()] }],
                learning_rate: 0.1,
            }),
            AdapterMatch::Exact,
        ),
        (
            "score_tokens_current_after_step",
            req(&PolicyRequest::Score { prompt: prompt("p0"), target: ScoreTarget::Tokens(strict_tokens.clone()), snapshot: SnapshotKind::Current }),
            AdapterMatch::Shape,
        ),
        (
            "score_tokens_old_before_swap",
            req(&PolicyRequest::Score { prompt: prompt("p0"), target: ScoreTarget::Tokens(strict_tokens.clone()), snapshot: SnapshotKind::Old }),
            AdapterMatch::Shape,
        ),
        ("swap_old", req(&PolicyRequest::Snapshot { op: SnapshotOp::SwapOld }), AdapterMatch::Exact),
        (
            "load_reference",
            req(&PolicyRequest::Snapshot { op: SnapshotOp::Load { id: "ref0".into(), into: SnapshotKind::Reference } }),
            AdapterMatch::Exact,
        ),
        (
            "zero_step",
            req(&PolicyRequest::Step {
                items: vec![StepItem { prompt_ref: "p1".into(), tokens: strict_tokens.clone(), coefficients: vec![0.0; strict_tokens.len()] }],
                learning_rate: 0.1,
            }),
            AdapterMatch::Exact,
        ),
        (
            "load_unknown_snapshot",
            req(&PolicyRequest::Snapshot { op: SnapshotOp::Load { id: "nope".into(), into: SnapshotKind::Current } }),
            AdapterMatch::Code,
        ),
        (
            "generate_zero_group",
            req(&PolicyRequest::Generate { prompt: prompt("p1"), group_size: 0, temperature: 0.9, max_new_tokens: 64, seed: 1 }),
            AdapterMatch::Code,
        ),
        (
            "score_misaligned_tokens",
            req(&PolicyRequest::Score { prompt: prompt("p1"), target: ScoreTarget::Tokens(vec![0, 0, 0]), snapshot: SnapshotKind::Current }),
            AdapterMatch::Code,
        ),
        ("wrong_version", r#"{"v":"v0","kind":"snapshot","op":"swap_old"}"#.to_string(), AdapterMatch::Code),
        ("not_json", "this is not json".to_string(), AdapterMatch::Code),
        ("unknown_kind", r#"{"v":"v1","kind":"train"}"#.to_string(), AdapterMatch::Code),
    ]
}

fn frames(payloads: &[&str]) -> Vec<u8> {
    let mut buf = Vec::new();
    for p in payloads {
        write_frame(&mut buf, p.as_bytes()).unwrap();
    }
    buf
}

fn replay(requests: &[&str]) -> Vec<String> {
    let input = frames(requests);
    let mut output = Vec::new();
    serve(&mut toy(), input.as_slice(), &mut output).unwrap();
    let mut cursor = output.as_slice();
    let mut out = Vec::new();
    while let Some(frame) = read_frame(&mut cursor).unwrap() {
        out.push(String::from_utf8(frame).unwrap());
    }
    out
}

#[test]
fn toy_policy_replays_fixtures_byte_for_byte() {
    let path = fixture_path();
    if std::env::var_os("SQLFORGE_RECORD_FIXTURES").is_some() {
        let sc = scenario();
        let requests: Vec<&str> = sc.iter().map(|(_, r, _)| r.as_str()).collect();
        let responses = replay(&requests);
        let mut text = String::new();
        for ((name, request, m), response) in sc.iter().zip(responses) {
            let ex = Exchange { name: name.to_string(), request: request.clone(), response, adapter_match: *m };
            text.push_str(&serde_json::to_string(&ex).unwrap());
            text.push('\n');
        }
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
    }

    let fixtures: Vec<Exchange> =
        fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(fixtures.len(), scenario().len());
    let requests: Vec<&str> = fixtures.iter().map(|e| e.request.as_str()).collect();
    let expected: Vec<&str> = fixtures.iter().map(|e| e.response.as_str()).collect();

    // the whole response stream, compared at the framing level
    let input = frames(&requests);
    let mut output = Vec::new();
    serve(&mut toy(), input.as_slice(), &mut output).unwrap();
    assert_eq!(output, frames(&expected));
}

#[test]
fn fixtures_cover_every_message_kind() {
    let fixtures: Vec<Exchange> =
        fs::read_to_string(fixture_path()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kind = |s: &str| serde_json::from_str::<serde_json::Value>(s).ok().and_then(|v| v["kind"].as_str().map(str::to_string));
    let requests: Vec<Option<String>> = fixtures.iter().map(|e| kind(&e.request)).collect();
    let responses: Vec<Option<String>> = fixtures.iter().map(|e| kind(&e.response)).collect();
    for k in ["generate", "score", "step", "snapshot"] {
        assert!(requests.contains(&Some(k.to_string())), "no {k} request");
    }
    for k in ["candidates", "scored", "ack", "error"] {
        assert!(responses.contains(&Some(k.to_string())), "no {k} response");
    }
    for e in fixtures.iter().filter(|e| e.adapter_match == AdapterMatch::Code) {
        assert_eq!(kind(&e.response).as_deref(), Some("error"), "{}", e.name);
    }
}
