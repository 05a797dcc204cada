use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqlforge::grpo::{clipped_surrogate, compute_advantages, BaselineMode, TokenLogProbs};
use sqlforge::policy::toy::OutputFormat;
use sqlforge::policy::{GenerateParams, Policy, ScoreTarget, SnapshotKind, SnapshotOp, StepItem, ToyGrammar, ToyPolicy};
use sqlforge::prompt::Prompt;

fn prompt(r: &str) -> Prompt {
    Prompt { text: String::new(), token_count: 0, record_ref: r.into() }
}

fn refs() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn seq_logprob(p: &mut ToyPolicy, r: &str, tokens: &[u32]) -> f64 {
    p.score(&prompt(r), &ScoreTarget::Tokens(tokens.to_vec()), SnapshotKind::Current).unwrap().logprobs.iter().sum()
}

#[test]
fn uniform_four_way_sampling_is_within_three_sigma() {
    let mut p = ToyPolicy::new(ToyGrammar::four_way(), &refs()).unwrap();
    let n = 10_000;
    let cands = p.generate(&prompt("a"), &GenerateParams { group_size: n, temperature: 1.0, max_new_tokens: 8, seed: 99 }).unwrap();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in &cands {
        *counts.entry(c.text.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    for (text, c) in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 3.0 * sigma, "{text}: {f}");
    }
}

/// With no clipping, no KL, and constant-length completions, the Monte-Carlo
/// surrogate gradient must point the same way as the exact policy gradient.
#[test]
fn surrogate_gradient_signs_match_exact_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grammar = ToyGrammar {
        formats: vec![OutputFormat::Bare],
        columns: ["id", "name", "age", "amount", "city"].map(String::from).to_vec(),
        tables: ["users", "orders", "products"].map(String::from).to_vec(),
        where_clause: false,
        ..ToyGrammar::sql_task()
    };
    let mut p = ToyPolicy::new(grammar, &refs()).unwrap();
    let theta: Vec<f64> = (0..p.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p.reset_all(theta);
    let all = p.completions();
    assert!(all.iter().all(|t| t.len() == all[0].len()));
    let reward: HashMap<Vec<u32>, f64> = all.iter().map(|t| (t.clone(), rng.gen_range(0.0..3.5))).collect();

    // exact: sum_o pi(o) R(o) grad log pi(o)
    let exact_items: Vec<StepItem> = all
        .iter()
        .map(|t| {
            let w = seq_logprob(&mut p, "a", t).exp() * reward[t];
            StepItem { prompt_ref: "a".into(), tokens: t.clone(), coefficients: vec![w; t.len()] }
        })
        .collect();
    let exact = p.gradient(&exact_items).unwrap();

    let g = 6;
    let groups = 10_000 / g;
    let mut mc = vec![0.0; p.num_params()];
    for s in 0..groups {
        let cands = p.generate(&prompt("a"), &GenerateParams { group_size: g, temperature: 1.0, max_new_tokens: 8, seed: s as u64 }).unwrap();
        let totals: Vec<f64> = cands.iter().map(|c| reward[&c.tokens]).collect();
        let adv = compute_advantages(&totals, &mut BaselineMode::GroupMean).unwrap();
        let lps: Vec<TokenLogProbs> = cands.iter().map(|c| TokenLogProbs::on_policy(c.logprobs.clone())).collect();
        let sur = clipped_surrogate(&lps, &adv.values, 1e12).unwrap();
        let items: Vec<StepItem> = cands
            .iter()
            .zip(sur.coefficients)
            .map(|(c, coef)| StepItem { prompt_ref: "a".into(), tokens: c.tokens.clone(), coefficients: coef })
            .collect();
        for (m, d) in mc.iter_mut().zip(p.gradient(&items).unwrap()) {
            *m += d;
        }
    }
    let max = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut compared = 0;
    for (i, (e, m)) in exact.iter().zip(&mc).enumerate() {
        if e.abs() > 0.05 * max {
            compared += 1;
            assert_eq!(e.signum(), m.signum(), "parameter {i}: exact {e}, monte carlo {m}");
        }
    }
    assert!(compared >= 6, "only {compared} informative parameters");
}

#[test]
fn two_small_steps_match_one_summed_step_to_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut base = ToyPolicy::new(ToyGrammar::sql_task(), &refs()).unwrap();
    base.reset_all((0..base.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cands = base.generate(&prompt("a"), &GenerateParams { group_size: 2, temperature: 1.0, max_new_tokens: 8, seed: 1 }).unwrap();
    let item = |c: &sqlforge::policy::Candidate, k: f64| StepItem { prompt_ref: "a".into(), tokens: c.tokens.clone(), coefficients: vec![k; c.tokens.len()] };
    let (s1, s2) = (item(&cands[0], 1.3), item(&cands[1], -0.7));
    let eta = 1e-4;

    let mut two = base.clone();
    two.apply_step(&[s1.clone()], eta).unwrap();
    two.apply_step(&[s2.clone()], eta).unwrap();
    let mut one = base.clone();
    one.apply_step(&[s1, s2], eta).unwrap();
    let diff = two
        .params(SnapshotKind::Current)
        .iter()
        .zip(one.params(SnapshotKind::Current))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff <= 1e-6, "{diff}");
}

#[test]
fn generate_then_score_round_trips_for_every_snapshot() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = ToyPolicy::new(ToyGrammar::sql_task(), &refs()).unwrap();
    p.reset_all((0..p.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect());
    p.snapshot(&SnapshotOp::Save { id: "now".into(), from: SnapshotKind::Current }).unwrap();
    p.snapshot(&SnapshotOp::Load { id: "now".into(), into: SnapshotKind::Reference }).unwrap();
    p.snapshot(&SnapshotOp::SwapOld).unwrap();
    let cands = p.generate(&prompt("b"), &GenerateParams { group_size: 20, temperature: 1.0, max_new_tokens: 8, seed: 5 }).unwrap();
    for c in &cands {
        for kind in [SnapshotKind::Current, SnapshotKind::Old, SnapshotKind::Reference] {
            let s = p.score(&prompt("b"), &ScoreTarget::Tokens(c.tokens.clone()), kind).unwrap();
            assert_eq!(s.logprobs, c.logprobs, "{kind:?}");
        }
        let by_text = p.score(&prompt("b"), &ScoreTarget::Text(c.text.clone()), SnapshotKind::Current).unwrap();
        assert_eq!(by_text.tokens, c.tokens);
    }
}

#[test]
fn zero_coefficient_step_leaves_parameters_bit_identical() {
    let mut p = ToyPolicy::new(ToyGrammar::sql_task(), &refs()).unwrap();
    p.reset_all((0..p.num_params()).map(|i| (i as f64).sin()).collect());
    let before: Vec<u64> = p.params(SnapshotKind::Current).iter().map(|x| x.to_bits()).collect();
    let tokens = p.greedy("a").unwrap();
    p.apply_step(&[StepItem { prompt_ref: "a".into(), coefficients: vec![0.0; tokens.len()], tokens }], 10.0).unwrap();
    let after: Vec<u64> = p.params(SnapshotKind::Current).iter().map(|x| x.to_bits()).collect();
    assert_eq!(before, after);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_stay_normalized_under_steps(
        seed in any::<u64>(),
        steps in 1usize..20,
        lr in 0.01f64..50.0,
    ) {
        let mut p = ToyPolicy::new(ToyGrammar::sql_task(), &refs()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..steps {
            let r = if rng.gen_bool(0.5) { "a" } else { "b" };
            let c = p.generate(&prompt(r), &GenerateParams { group_size: 1, temperature: 1.0, max_new_tokens: 8, seed: s as u64 }).unwrap().remove(0);
            let coef = rng.gen_range(-3.0..3.0);
            p.apply_step(&[StepItem { prompt_ref: r.into(), coefficients: vec![coef; c.tokens.len()], tokens: c.tokens }], lr).unwrap();
        }
        for row in p.all_distributions(SnapshotKind::Current) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
        }
    }
}
