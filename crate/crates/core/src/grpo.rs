//! Group-relative policy optimization objective.
//!
//! Everything here works on per-token log-probabilities and returns both the
//! scalar objective and its derivative with respect to each current-policy
//! log-probability. A policy turns those per-token coefficients into a
//! parameter update via `sum_t coef_t * grad(logp_t)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group is empty")]
    EmptyGroup,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

/// Log-probabilities of one candidate's tokens under the three snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub current: Vec<f64>,
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(current: Vec<f64>, old: Vec<f64>, reference: Vec<f64>) -> Result<Self, GrpoError> {
        if current.len() != old.len() || current.len() != reference.len() {
            return Err(GrpoError::LengthMismatch(format!(
                "current {} / old {} / reference {}",
                current.len(),
                old.len(),
                reference.len()
            )));
        }
        Ok(Self { current, old, reference })
    }

    /// All three snapshots equal.
    pub fn on_policy(lp: Vec<f64>) -> Self {
        Self { old: lp.clone(), reference: lp.clone(), current: lp }
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    fn check(&self) -> Result<(), GrpoError> {
        if self.current.len() != self.old.len() || self.current.len() != self.reference.len() {
            return Err(GrpoError::LengthMismatch("snapshot lengths differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoHyper {
    pub epsilon: f64,
    pub beta: f64,
    pub group_size: usize,
    pub temperature: f64,
}

impl Default for GrpoHyper {
    fn default() -> Self {
        Self { epsilon: 0.2, beta: 0.001, group_size: 6, temperature: 0.9 }
    }
}

impl GrpoHyper {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::InvalidHyper(format!("epsilon {} not in (0,1)", self.epsilon)));
        }
        if !(self.beta >= 0.0) {
            return Err(GrpoError::InvalidHyper(format!("beta {} is negative", self.beta)));
        }
        if self.group_size < 2 {
            return Err(GrpoError::InvalidHyper(format!("group size {} < 2", self.group_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(GrpoError::InvalidHyper(format!("temperature {} not positive", self.temperature)));
        }
        Ok(())
    }
}

/// Exponential moving average of past group maxima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningBaseline {
    pub decay: f64,
    pub value: Option<f64>,
}

impl RunningBaseline {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn observe(&mut self, r_max: f64) {
        self.value = Some(match self.value {
            Some(v) => self.decay * v + (1.0 - self.decay) * r_max,
            None => r_max,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaselineMode {
    GroupMean,
    /// Baseline is the moving average of earlier groups' maxima; the current
    /// group's maximum is folded in after its advantages are computed. With no
    /// history the group mean is used.
    Running(RunningBaseline),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub baseline: f64,
    pub values: Vec<f64>,
    pub r_max: f64,
    pub argmax: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn compute_advantages(totals: &[f64], mode: &mut BaselineMode) -> Result<Advantages, GrpoError> {
    if totals.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let (argmax, r_max) = argmax_first(totals);
    let baseline = match mode {
        BaselineMode::GroupMean => mean(totals),
        BaselineMode::Running(rb) => {
            let b = rb.value.unwrap_or_else(|| mean(totals));
            rb.observe(r_max);
            b
        }
    };
    let values = totals.iter().map(|t| t - baseline).collect();
    Ok(Advantages { baseline, values, r_max, argmax })
}

/// Index and value of the maximum; ties go to the lowest index.
fn argmax_first(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

/// Objective value plus d(objective)/d(logp_current) for every token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub objective: f64,
    pub coefficients: Vec<Vec<f64>>,
}

/// `(1/G) sum_i (1/|o_i|) sum_t min(r A_i, clip(r, 1-eps, 1+eps) A_i)` with
/// `r = exp(lp_current - lp_old)`. Empty candidates contribute nothing.
pub fn clipped_surrogate(lps: &[TokenLogProbs], advantages: &[f64], epsilon: f64) -> Result<Surrogate, GrpoError> {
    if lps.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if lps.len() != advantages.len() {
        return Err(GrpoError::LengthMismatch(format!("{} candidates, {} advantages", lps.len(), advantages.len())));
    }
    let g = lps.len() as f64;
    let mut objective = 0.0;
    let mut coefficients = Vec::with_capacity(lps.len());
    for (lp, &adv) in lps.iter().zip(advantages) {
        lp.check()?;
        let n = lp.len();
        if n == 0 {
            coefficients.push(Vec::new());
            continue;
        }
        let scale = 1.0 / (g * n as f64);
        let mut coef = Vec::with_capacity(n);
        for (cur, old) in lp.current.iter().zip(&lp.old) {
            let r = (cur - old).exp();
            let unclipped = r * adv;
            let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
            if unclipped <= clipped {
                objective += scale * unclipped;
                coef.push(scale * unclipped);
            } else {
                // clipped branch is flat in r
                objective += scale * clipped;
                coef.push(0.0);
            }
        }
        coefficients.push(coef);
    }
    Ok(Surrogate { objective, coefficients })
}

/// `KL(p || q)` summed over positions; each row is a full distribution.
pub fn kl_exact(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64, GrpoError> {
    if p.len() != q.len() {
        return Err(GrpoError::LengthMismatch(format!("{} vs {} positions", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        if pr.len() != qr.len() {
            return Err(GrpoError::LengthMismatch(format!("support {} vs {}", pr.len(), qr.len())));
        }
        for (&pi, &qi) in pr.iter().zip(qr) {
            if pi > 0.0 {
                total += pi * (pi / qi).ln();
            }
        }
    }
    Ok(total)
}

/// Per-token estimate `x - ln x - 1` with `x = exp(lp_ref - lp_current)`.
/// Non-negative, and zero exactly where the two log-probs agree.
pub fn kl_sampled(lp_current: &[f64], lp_ref: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if lp_current.len() != lp_ref.len() {
        return Err(GrpoError::LengthMismatch(format!("{} vs {} tokens", lp_current.len(), lp_ref.len())));
    }
    Ok(lp_current
        .iter()
        .zip(lp_ref)
        .map(|(c, r)| {
            let d = r - c;
            // exp(d) - d - 1, accurate near d = 0
            d.exp_m1() - d
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    Exact,
    Sampled,
}

/// Input to [`kl_penalty`]: full distributions for the exact divergence, or
/// sampled-token log-probabilities for the estimator.
#[derive(Debug, Clone, Copy)]
pub enum KlInput<'a> {
    Exact { current: &'a [Vec<f64>], reference: &'a [Vec<f64>] },
    Sampled { current: &'a [f64], reference: &'a [f64] },
}

impl KlInput<'_> {
    pub fn estimator(&self) -> KlEstimator {
        match self {
            KlInput::Exact { .. } => KlEstimator::Exact,
            KlInput::Sampled { .. } => KlEstimator::Sampled,
        }
    }
}

pub fn kl_penalty(input: KlInput<'_>) -> Result<f64, GrpoError> {
    match input {
        KlInput::Exact { current, reference } => kl_exact(current, reference),
        KlInput::Sampled { current, reference } => Ok(kl_sampled(current, reference)?.iter().sum()),
    }
}

/// Where the KL term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScope {
    /// Inside the per-token average, next to the surrogate term.
    #[default]
    PerToken,
    /// Summed over a sequence, averaged over the group only.
    PerSequence,
}

/// One prompt's sampled group with rewards and log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_ref: String,
    pub totals: Vec<f64>,
    pub logprobs: Vec<TokenLogProbs>,
    pub advantages: Advantages,
}

impl Group {
    pub fn new(
        prompt_ref: impl Into<String>,
        totals: Vec<f64>,
        logprobs: Vec<TokenLogProbs>,
        mode: &mut BaselineMode,
    ) -> Result<Self, GrpoError> {
        if totals.len() != logprobs.len() {
            return Err(GrpoError::LengthMismatch(format!("{} totals, {} candidates", totals.len(), logprobs.len())));
        }
        let advantages = compute_advantages(&totals, mode)?;
        Ok(Self { prompt_ref: prompt_ref.into(), totals, logprobs, advantages })
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObjective {
    pub objective: f64,
    pub surrogate: f64,
    /// Mean per-token KL estimate across the group (diagnostic).
    pub kl: f64,
    pub coefficients: Vec<Vec<f64>>,
}

/// Clipped surrogate minus `beta` times the sampled KL estimate, with the
/// derivative of the whole expression per current-policy token log-prob.
pub fn grpo_step_objective(group: &Group, hyper: &GrpoHyper, scope: KlScope) -> Result<StepObjective, GrpoError> {
    let mut surr = clipped_surrogate(&group.logprobs, &group.advantages.values, hyper.epsilon)?;
    let g = group.len() as f64;
    let mut kl_total = 0.0;
    let mut kl_tokens = 0usize;
    let mut penalty = 0.0;
    for (lp, coef) in group.logprobs.iter().zip(surr.coefficients.iter_mut()) {
        let n = lp.len();
        if n == 0 {
            continue;
        }
        let k3 = kl_sampled(&lp.current, &lp.reference)?;
        let scale = match scope {
            KlScope::PerToken => 1.0 / (g * n as f64),
            KlScope::PerSequence => 1.0 / g,
        };
        for ((c, (cur, rf)), k) in coef.iter_mut().zip(lp.current.iter().zip(&lp.reference)).zip(&k3) {
            penalty += scale * k;
            // d/d(cur) [exp(ref-cur) - (ref-cur) - 1] = 1 - exp(ref-cur)
            *c -= hyper.beta * scale * (1.0 - (rf - cur).exp());
        }
        kl_total += k3.iter().sum::<f64>();
        kl_tokens += n;
    }
    Ok(StepObjective {
        objective: surr.objective - hyper.beta * penalty,
        surrogate: surr.objective,
        kl: if kl_tokens > 0 { kl_total / kl_tokens as f64 } else { 0.0 },
        coefficients: surr.coefficients,
    })
}

/// `(R_max - b)` on every token of the best candidate, zero elsewhere.
pub fn best_of_group_gradient(group: &Group, baseline: f64) -> Result<Vec<Vec<f64>>, GrpoError> {
    if group.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let (best, r_max) = argmax_first(&group.totals);
    Ok(group
        .logprobs
        .iter()
        .enumerate()
        .map(|(i, lp)| if i == best { vec![r_max - baseline; lp.len()] } else { vec![0.0; lp.len()] })
        .collect())
}

/// Cross-entropy of the gold tokens: `-sum_t logp_t`.
pub fn supervised_warmup_loss(lp_gold: &[f64]) -> f64 {
    -lp_gold.iter().sum::<f64>()
}
