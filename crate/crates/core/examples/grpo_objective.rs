//! Walks one group of four candidates through the objective: advantages,
//! ratios, clipping, the KL penalty and the per-token coefficients a policy
//! backend would receive.
//!
//! cargo run --example grpo_objective

use sqlforge::grpo::{grpo_step_objective, BaselineMode, Group, GrpoHyper, KlScope, TokenLogProbs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let totals = vec![3.5, 0.5, 1.5, 0.5];
    // (current, old, reference) per token; the first candidate has drifted
    // far enough from the old policy to be clipped
    let logprobs = vec![
        TokenLogProbs::new(vec![-0.2, -0.1, -0.3], vec![-0.6, -0.4, -0.3], vec![-0.7, -0.5, -0.4])?,
        TokenLogProbs::new(vec![-1.2, -0.9], vec![-1.1, -0.9], vec![-1.0, -0.8])?,
        TokenLogProbs::new(vec![-0.8, -0.5, -0.6, -0.4], vec![-0.8, -0.5, -0.6, -0.4], vec![-0.8, -0.5, -0.6, -0.4])?,
        TokenLogProbs::new(vec![-2.0], vec![-1.5], vec![-1.5])?,
    ];
    let group = Group::new("q1", totals, logprobs, &mut BaselineMode::GroupMean)?;
    println!("baseline {:.3}  advantages {:?}", group.advantages.baseline, group.advantages.values);

    let hyper = GrpoHyper::default();
    for scope in [KlScope::PerToken, KlScope::PerSequence] {
        let step = grpo_step_objective(&group, &hyper, scope)?;
        println!("\n{scope:?}: objective {:.5}  surrogate {:.5}  mean kl {:.5}", step.objective, step.surrogate, step.kl);
        for (i, (lp, coef)) in group.logprobs.iter().zip(&step.coefficients).enumerate() {
            let ratios: Vec<String> = lp.current.iter().zip(&lp.old).map(|(c, o)| format!("{:.3}", (c - o).exp())).collect();
            let coef: Vec<String> = coef.iter().map(|c| format!("{c:+.4}")).collect();
            println!("  candidate {i}  ratios [{}]  coefficients [{}]", ratios.join(", "), coef.join(", "));
        }
    }
    Ok(())
}
