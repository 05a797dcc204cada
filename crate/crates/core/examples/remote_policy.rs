//! Drives a policy over the length-prefixed wire protocol. The server side is
//! the toy policy on a local TCP port; a real model adapter speaks the same
//! frames.
//!
//! cargo run --example remote_policy

use std::net::TcpListener;

use sqlforge::policy::{serve, GenerateParams, Policy, RemotePolicy, ScoreTarget, SnapshotKind, SnapshotOp, StepItem};
use sqlforge::prompt::{build_prompt, FormatTemplate, WhitespaceTokenizer};
use sqlforge::toy_task;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = toy_task::records();
    let refs: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let server = std::thread::spawn(move || {
        let mut toy = sqlforge::policy::ToyPolicy::new(sqlforge::policy::ToyGrammar::sql_task(), &refs).unwrap();
        let (stream, _) = listener.accept().unwrap();
        serve(&mut toy, stream.try_clone().unwrap(), stream).unwrap();
    });

    let mut remote = RemotePolicy::connect(addr)?;
    let prompt = build_prompt(&records[0], &FormatTemplate::default(), &WhitespaceTokenizer)?;
    let params = GenerateParams { group_size: 3, temperature: 0.9, max_new_tokens: 64, seed: 1 };
    let cands = remote.generate(&prompt, &params)?;
    for c in &cands {
        println!("{:>7.3}  {}", c.logprobs.iter().sum::<f64>(), c.text);
    }

    // push up the first candidate and watch its log-prob move
    remote.snapshot(&SnapshotOp::SwapOld)?;
    let best = &cands[0];
    let item = StepItem { prompt_ref: prompt.record_ref.clone(), tokens: best.tokens.clone(), coefficients: vec![1.0; best.tokens.len()] };
    remote.apply_step(&[item], 1.0)?;
    for kind in [SnapshotKind::Old, SnapshotKind::Current] {
        let s = remote.score(&prompt, &ScoreTarget::Tokens(best.tokens.clone()), kind)?;
        println!("{kind:?} log-prob {:.3}", s.logprobs.iter().sum::<f64>());
    }

    drop(remote);
    server.join().expect("server thread");
    Ok(())
}
