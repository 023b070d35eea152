//! Sequence-level stochastic gradient estimators.
//!
//! Each estimator consumes a [`SampleBatch`] (one prompt, `n` responses) and
//! returns a flat gradient over the policy logits. AGRO estimators return
//! gradients of a consistency loss and are followed downhill; RLOO and the
//! KL-regularized policy gradient return gradients of the regularized
//! objective and are followed uphill (see [`Direction`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TabularEnv;
use crate::error::{Error, Result};
use crate::policy::{add_score, GradEstimate, SoftmaxPolicy};

/// Where the responses of a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    OnPolicy,
    BehaviorMu,
    Buffer,
}

/// One prompt with `n` sampled responses and their rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub prompt: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    pub behavior: Behavior,
    pub behavior_logprobs: Option<Vec<f64>>,
}

impl SampleBatch {
    /// Builds a batch, looking rewards up in `env`.
    pub fn new(env: &TabularEnv, prompt: usize, responses: Vec<usize>, behavior: Behavior) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::invalid("a batch needs at least one response"));
        }
        for &y in &responses {
            env.check_index(prompt, y)?;
        }
        let rewards = responses.iter().map(|&y| env.reward(prompt, y)).collect();
        Ok(Self {
            prompt,
            responses,
            rewards,
            behavior,
            behavior_logprobs: None,
        })
    }

    /// Draws `n` responses for `prompt` from `sampler`.
    pub fn draw<R: Rng + ?Sized>(
        env: &TabularEnv,
        sampler: &SoftmaxPolicy,
        prompt: usize,
        n: usize,
        behavior: Behavior,
        rng: &mut R,
    ) -> Self {
        let log_probs = sampler.log_probs(prompt);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let responses: Vec<usize> = (0..n)
            .map(|_| crate::env::sample_categorical(&probs, rng))
            .collect();
        let rewards = responses.iter().map(|&y| env.reward(prompt, y)).collect();
        let behavior_logprobs = Some(responses.iter().map(|&y| log_probs[y]).collect());
        Self {
            prompt,
            responses,
            rewards,
            behavior,
            behavior_logprobs,
        }
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }
}

/// Learned per-prompt value `V(x)` for the single-sample variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub v: Vec<f64>,
}

impl ValueHead {
    pub fn zeros(num_prompts: usize) -> Self {
        Self {
            v: vec![0.0; num_prompts],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Gradient of a loss: step against it.
    Descent,
    /// Gradient of the objective: step along it.
    Ascent,
}

/// Stochastic estimators selectable by string key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    OffPolicyAgro,
    Pd,
    Lr,
    OnPolicyAgro,
    LrBiased,
    Rloo,
    KlPg,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::OffPolicyAgro,
        Estimator::Pd,
        Estimator::Lr,
        Estimator::OnPolicyAgro,
        Estimator::LrBiased,
        Estimator::Rloo,
        Estimator::KlPg,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Estimator::OffPolicyAgro => "off_policy_agro",
            Estimator::Pd => "pd",
            Estimator::Lr => "lr",
            Estimator::OnPolicyAgro => "on_policy_agro_full",
            Estimator::LrBiased => "lr_biased",
            Estimator::Rloo => "rloo",
            Estimator::KlPg => "kl_pg_offpolicy",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Estimator::Rloo | Estimator::KlPg => Direction::Ascent,
            _ => Direction::Descent,
        }
    }

    /// Estimators whose derivation assumes the batch was drawn from the current policy.
    pub fn on_policy_only(self) -> bool {
        matches!(
            self,
            Estimator::Pd | Estimator::Lr | Estimator::OnPolicyAgro | Estimator::LrBiased | Estimator::Rloo
        )
    }

    /// AGRO estimators need `beta > 0`; RLOO and KL-PG accept `beta = 0`.
    pub fn requires_positive_beta(self) -> bool {
        !matches!(self, Estimator::Rloo | Estimator::KlPg)
    }

    pub fn estimate(
        self,
        policy: &SoftmaxPolicy,
        env: &TabularEnv,
        beta: f64,
        batch: &SampleBatch,
    ) -> Result<GradEstimate> {
        if self.on_policy_only() && batch.behavior != Behavior::OnPolicy {
            return Err(Error::Unsupported(format!("{} needs responses drawn from the current policy", self.key())));
        }
        match self {
            Estimator::OffPolicyAgro => off_policy_agro_grad(policy, env, beta, batch),
            Estimator::Pd => pd_grad(policy, env, beta, batch),
            Estimator::Lr => lr_grad(policy, env, beta, batch),
            Estimator::OnPolicyAgro => on_policy_agro_grad(policy, env, beta, batch),
            Estimator::LrBiased => lr_biased_grad(policy, env, beta, batch),
            Estimator::Rloo => rloo_grad(policy, env, beta, batch),
            Estimator::KlPg => kl_pg_offpolicy_grad(policy, env, beta, batch),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.key() == s)
            .ok_or_else(|| {
                let keys: Vec<_> = Estimator::ALL.iter().map(|e| e.key()).collect();
                Error::config("estimator", format!("unknown key `{s}`; valid keys: {}", keys.join(", ")))
            })
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> Self {
        e.key().to_string()
    }
}

/// `R(x, y) = r(x, y) - beta * log(pi(y|x) / pi_ref(y|x))`.
pub fn regularized_reward(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    x: usize,
    y: usize,
) -> Result<f64> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    policy.check_matches(env)?;
    env.check_index(x, y)?;
    Ok(env.reward(x, y) - beta * (policy.logprob(x, y)? - env.ref_logprob(x, y)))
}

fn leave_one_out(values: &[f64], i: usize) -> f64 {
    let n = values.len();
    let sum: f64 = values
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, v)| v)
        .sum();
    sum / (n - 1) as f64
}

/// Per-batch quantities shared by the estimators.
struct Prepared {
    probs: Vec<f64>,
    reg: Vec<f64>,
    loo: Vec<f64>,
}

impl Prepared {
    fn new(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, batch: &SampleBatch, min_n: usize) -> Result<Self> {
        policy.check_matches(env)?;
        if batch.n() < min_n {
            return Err(Error::invalid(format!(
                "estimator needs n >= {min_n} samples, got {}",
                batch.n()
            )));
        }
        if batch.rewards.len() != batch.n() {
            return Err(Error::Shape("rewards and responses differ in length".into()));
        }
        for &y in &batch.responses {
            env.check_index(batch.prompt, y)?;
        }
        let x = batch.prompt;
        let log_probs = policy.log_probs(x);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        let reg: Vec<f64> = batch
            .responses
            .iter()
            .zip(&batch.rewards)
            .map(|(&y, &r)| r - beta * (log_probs[y] - env.ref_logprob(x, y)))
            .collect();
        let loo = if batch.n() >= 2 {
            (0..batch.n()).map(|i| leave_one_out(&reg, i)).collect()
        } else {
            vec![f64::NAN]
        };
        Ok(Self {
            probs,
            reg,
            loo,
        })
    }

    fn advantages(&self) -> impl Iterator<Item = f64> + '_ {
        self.reg.iter().zip(&self.loo).map(|(r, b)| r - b)
    }

    /// `sum_i weights[i] * score(y_i)`.
    fn weighted_scores(&self, batch: &SampleBatch, weights: impl Iterator<Item = f64>, dim: usize) -> Vec<f64> {
        let mut g = vec![0.0; dim];
        for (&y, w) in batch.responses.iter().zip(weights) {
            add_score(&self.probs, batch.prompt, y, w, &mut g);
        }
        g
    }
}

fn require_positive_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "AGRO estimators require beta > 0, got {beta}"
        )));
    }
    Ok(())
}

fn require_nonnegative_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Leave-one-out mean of the regularized rewards of the other samples.
pub fn loo_baseline(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
    i: usize,
) -> Result<f64> {
    require_nonnegative_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    prep.loo
        .get(i)
        .copied()
        .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))
}

/// `-(beta/n) * sum_i (R_i - loo_i) * score(y_i)`.
pub fn off_policy_agro_grad(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
) -> Result<GradEstimate> {
    require_positive_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let g = prep.weighted_scores(batch, prep.advantages().map(|a| -beta / n * a), policy.param_dim());
    Ok(GradEstimate::new(Estimator::OffPolicyAgro.key(), g, batch.n(), beta))
}

/// Pathwise-derivative part of the on-policy gradient: the off-policy
/// estimator applied to an on-policy batch.
pub fn pd_grad(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, batch: &SampleBatch) -> Result<GradEstimate> {
    let mut g = off_policy_agro_grad(policy, env, beta, batch)?;
    g.estimator_id = Estimator::Pd.key().into();
    Ok(g)
}

/// Likelihood-ratio part: `(1/2n) * sum_i (R_i - loo_i)^2 * score(y_i)`.
pub fn lr_grad(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, batch: &SampleBatch) -> Result<GradEstimate> {
    require_positive_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let g = prep.weighted_scores(batch, prep.advantages().map(|a| a * a / (2.0 * n)), policy.param_dim());
    Ok(GradEstimate::new(Estimator::Lr.key(), g, batch.n(), beta))
}

/// Full on-policy estimator `(1/2n) * sum_i (R_i - loo_i - beta)^2 * score(y_i)`.
///
/// Per sample it equals `pd + lr + (beta^2/2n) * sum_i score(y_i)`; the last
/// term has zero mean on-policy, so the expectation matches `pd + lr`.
pub fn on_policy_agro_grad(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
) -> Result<GradEstimate> {
    require_positive_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let g = prep.weighted_scores(
        batch,
        prep.advantages().map(|a| (a - beta).powi(2) / (2.0 * n)),
        policy.param_dim(),
    );
    Ok(GradEstimate::new(Estimator::OnPolicyAgro.key(), g, batch.n(), beta))
}

/// LR estimate with a leave-one-out baseline over the squared deviations.
/// Biased, because each `A_j` depends on `y_i` through its own baseline.
pub fn lr_biased_grad(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
) -> Result<GradEstimate> {
    require_positive_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let sq: Vec<f64> = prep.advantages().map(|a| a * a).collect();
    let weights = (0..batch.n()).map(|i| (sq[i] - leave_one_out(&sq, i)) / (2.0 * n));
    let g = prep.weighted_scores(batch, weights, policy.param_dim());
    Ok(GradEstimate::new(Estimator::LrBiased.key(), g, batch.n(), beta))
}

/// REINFORCE on the regularized reward with a leave-one-out baseline.
/// Ascent direction for the regularized objective; legal at `beta = 0`.
pub fn rloo_grad(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, batch: &SampleBatch) -> Result<GradEstimate> {
    require_nonnegative_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let g = prep.weighted_scores(batch, prep.advantages().map(|a| a / n), policy.param_dim());
    Ok(GradEstimate::new(Estimator::Rloo.key(), g, batch.n(), beta))
}

/// Exact `d KL(pi(.|x) || pi_ref(.|x)) / d theta[x]`: `pi_k (log(pi_k/ref_k) - KL)`.
pub(crate) fn add_kl_grad(policy: &SoftmaxPolicy, env: &TabularEnv, x: usize, weight: f64, grad: &mut [f64]) {
    let lp = policy.log_probs(x);
    let lref = env.ref_log_prob_row(x);
    let ratio: Vec<f64> = lp.iter().zip(lref).map(|(a, b)| a - b).collect();
    let kl: f64 = lp.iter().zip(&ratio).map(|(l, r)| l.exp() * r).sum();
    let k = lp.len();
    for (j, g) in grad[x * k..(x + 1) * k].iter_mut().enumerate() {
        *g += weight * lp[j].exp() * (ratio[j] - kl);
    }
}

/// Reward REINFORCE with leave-one-out baseline minus `beta * grad KL(pi, pi_ref)`,
/// the KL gradient computed exactly. Ascent direction.
pub fn kl_pg_offpolicy_grad(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
) -> Result<GradEstimate> {
    require_nonnegative_beta(beta)?;
    let prep = Prepared::new(policy, env, beta, batch, 2)?;
    let n = batch.n() as f64;
    let weights = (0..batch.n()).map(|i| (batch.rewards[i] - leave_one_out(&batch.rewards, i)) / n);
    let mut g = prep.weighted_scores(batch, weights, policy.param_dim());
    if beta > 0.0 {
        add_kl_grad(policy, env, batch.prompt, -beta, &mut g);
    }
    Ok(GradEstimate::new(Estimator::KlPg.key(), g, batch.n(), beta))
}

/// Two-sample contrastive form:
/// `-beta * (r1 - r2 - beta * log[pi(y1) pi_ref(y2) / (pi(y2) pi_ref(y1))]) * (score(y1) - score(y2))`.
pub fn contrastive_pair_grad(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    x: usize,
    y1: usize,
    y2: usize,
) -> Result<GradEstimate> {
    require_positive_beta(beta)?;
    policy.check_matches(env)?;
    env.check_index(x, y1)?;
    env.check_index(x, y2)?;
    let lp = policy.log_probs(x);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let log_ratio = (lp[y1] - env.ref_logprob(x, y1)) - (lp[y2] - env.ref_logprob(x, y2));
    let coef = -beta * (env.reward(x, y1) - env.reward(x, y2) - beta * log_ratio);
    let mut g = vec![0.0; policy.param_dim()];
    add_score(&probs, x, y1, coef, &mut g);
    add_score(&probs, x, y2, -coef, &mut g);
    Ok(GradEstimate::new("contrastive_pair", g, 2, beta))
}

/// Gradients of `(r - V(x) - beta * log(pi/pi_ref))^2` for a single sample,
/// with respect to the logits and to `V(x)`.
pub fn value_joint_grad(
    policy: &SoftmaxPolicy,
    value: &ValueHead,
    env: &TabularEnv,
    beta: f64,
    x: usize,
    y: usize,
) -> Result<(GradEstimate, f64)> {
    require_positive_beta(beta)?;
    policy.check_matches(env)?;
    env.check_index(x, y)?;
    if value.v.len() != env.num_prompts() {
        return Err(Error::Shape("value head has the wrong number of prompts".into()));
    }
    let lp = policy.log_probs(x);
    let residual = env.reward(x, y) - value.v[x] - beta * (lp[y] - env.ref_logprob(x, y));
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut g = vec![0.0; policy.param_dim()];
    add_score(&probs, x, y, -2.0 * beta * residual, &mut g);
    Ok((GradEstimate::new("value_joint", g, 1, beta), -2.0 * residual))
}

/// Convenience: regularized rewards for every response of a batch.
pub fn batch_regularized_rewards(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    batch: &SampleBatch,
) -> Result<Vec<f64>> {
    require_nonnegative_beta(beta)?;
    Ok(Prepared::new(policy, env, beta, batch, 1)?.reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{canonical_env, random_env};
    use crate::math::max_abs_diff;
    use crate::oracle;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        max_abs_diff(a, b) < tol
    }

    #[test]
    fn regularized_reward_cases() {
        let env = canonical_env();
        let pi_ref = SoftmaxPolicy::from_ref(&env);
        assert_eq!(regularized_reward(&pi_ref, &env, 3.0, 0, 0).unwrap(), 1.0);
        let star = oracle::optimal_policy(&env, 1.0).unwrap();
        for y in 0..2 {
            let r = regularized_reward(&star.pi_star, &env, 1.0, 0, y).unwrap();
            assert!((r - 0.620_114_506_958_278).abs() < 1e-9);
        }
        let other = SoftmaxPolicy::new(1, 2, vec![0.3, -1.0]).unwrap();
        assert_eq!(regularized_reward(&other, &env, 0.0, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn loo_baseline_cases() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let b = SampleBatch::new(&env, 0, vec![0, 1], Behavior::OnPolicy).unwrap();
        assert_eq!(loo_baseline(&p, &env, 1.0, &b, 0).unwrap(), 0.0);
        assert_eq!(loo_baseline(&p, &env, 1.0, &b, 1).unwrap(), 1.0);
        let b4 = SampleBatch::new(&env, 0, vec![0, 1, 1, 0], Behavior::OnPolicy).unwrap();
        let got: Vec<f64> = (0..4).map(|i| loo_baseline(&p, &env, 1.0, &b4, i).unwrap()).collect();
        assert!(close(&got, &[1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let single = SampleBatch::new(&env, 0, vec![0], Behavior::OnPolicy).unwrap();
        assert!(matches!(loo_baseline(&p, &env, 1.0, &single, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn off_policy_agro_hand_value() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let b = SampleBatch::new(&env, 0, vec![0, 1], Behavior::BehaviorMu).unwrap();
        let g = off_policy_agro_grad(&p, &env, 1.0, &b).unwrap();
        assert!(close(&g.grad, &[-0.5, 0.5], 1e-15));
        let same = SampleBatch::new(&env, 0, vec![1, 1, 1], Behavior::BehaviorMu).unwrap();
        assert!(off_policy_agro_grad(&p, &env, 1.0, &same).unwrap().norm() < 1e-15);
    }

    #[test]
    fn agro_rejects_zero_beta_and_small_batches() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let b = SampleBatch::new(&env, 0, vec![0, 1], Behavior::OnPolicy).unwrap();
        for e in [Estimator::OffPolicyAgro, Estimator::Pd, Estimator::Lr, Estimator::OnPolicyAgro, Estimator::LrBiased] {
            assert!(e.estimate(&p, &env, 0.0, &b).is_err(), "{e}");
        }
        assert!(rloo_grad(&p, &env, 0.0, &b).is_ok());
        assert!(kl_pg_offpolicy_grad(&p, &env, 0.0, &b).is_ok());
        let single = SampleBatch::new(&env, 0, vec![0], Behavior::OnPolicy).unwrap();
        for e in Estimator::ALL {
            assert!(e.estimate(&p, &env, 1.0, &single).is_err(), "{e}");
        }
    }

    #[test]
    fn pd_equals_off_policy_bitwise() {
        let env = random_env(5, 2, 4, 1.0).unwrap();
        let p = SoftmaxPolicy::new(2, 4, vec![0.1, -0.2, 0.3, 0.9, -1.0, 0.0, 0.5, 0.2]).unwrap();
        let b = SampleBatch::new(&env, 1, vec![0, 3, 3, 2], Behavior::OnPolicy).unwrap();
        let a = off_policy_agro_grad(&p, &env, 0.7, &b).unwrap();
        let d = pd_grad(&p, &env, 0.7, &b).unwrap();
        assert_eq!(a.grad, d.grad);
        assert_eq!(d.estimator_id, "pd");
    }

    #[test]
    fn lr_cases() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let b = SampleBatch::new(&env, 0, vec![0, 1], Behavior::OnPolicy).unwrap();
        assert!(lr_grad(&p, &env, 1.0, &b).unwrap().norm() < 1e-15);
        let same = SampleBatch::new(&env, 0, vec![0, 0, 0], Behavior::OnPolicy).unwrap();
        assert!(lr_grad(&p, &env, 1.0, &same).unwrap().norm() < 1e-15);
    }

    #[test]
    fn on_policy_identical_batch() {
        let env = canonical_env();
        let p = SoftmaxPolicy::new(1, 2, vec![0.4, -0.1]).unwrap();
        let beta = 0.5;
        let b = SampleBatch::new(&env, 0, vec![1, 1, 1], Behavior::OnPolicy).unwrap();
        let g = on_policy_agro_grad(&p, &env, beta, &b).unwrap();
        let s = p.score(0, 1).unwrap();
        let expected: Vec<f64> = s.iter().map(|v| beta * beta / 6.0 * 3.0 * v).collect();
        assert!(close(&g.grad, &expected, 1e-15));
    }

    #[test]
    fn on_policy_is_pd_plus_lr_plus_zero_mean_term() {
        let env = random_env(11, 1, 3, 1.0).unwrap();
        let p = SoftmaxPolicy::new(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
        let beta = 0.3;
        let b = SampleBatch::new(&env, 0, vec![2, 0, 2], Behavior::OnPolicy).unwrap();
        let full = on_policy_agro_grad(&p, &env, beta, &b).unwrap().grad;
        let pd = pd_grad(&p, &env, beta, &b).unwrap().grad;
        let lr = lr_grad(&p, &env, beta, &b).unwrap().grad;
        let mut rebuilt: Vec<f64> = pd.iter().zip(&lr).map(|(a, b)| a + b).collect();
        for &y in &b.responses {
            crate::math::axpy(beta * beta / 6.0, &p.score(0, y).unwrap(), &mut rebuilt);
        }
        assert!(close(&full, &rebuilt, 1e-14));
    }

    #[test]
    fn lr_biased_two_samples_is_zero() {
        let env = random_env(2, 1, 3, 1.0).unwrap();
        let p = SoftmaxPolicy::new(1, 3, vec![0.5, 0.0, -0.5]).unwrap();
        for (a, b) in [(0, 1), (1, 2), (2, 2)] {
            let batch = SampleBatch::new(&env, 0, vec![a, b], Behavior::OnPolicy).unwrap();
            assert!(lr_biased_grad(&p, &env, 0.8, &batch).unwrap().norm() < 1e-15);
        }
        let same = SampleBatch::new(&env, 0, vec![1, 1, 1], Behavior::OnPolicy).unwrap();
        assert!(lr_biased_grad(&p, &env, 0.8, &same).unwrap().norm() < 1e-15);
    }

    #[test]
    fn rloo_at_zero_beta_is_reward_reinforce() {
        let env = random_env(4, 1, 3, 1.0).unwrap();
        let p = SoftmaxPolicy::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let b = SampleBatch::new(&env, 0, vec![0, 2, 1], Behavior::OnPolicy).unwrap();
        let g = rloo_grad(&p, &env, 0.0, &b).unwrap();
        let mut expected = vec![0.0; 3];
        for i in 0..3 {
            let adv = b.rewards[i] - leave_one_out(&b.rewards, i);
            crate::math::axpy(adv / 3.0, &p.score(0, b.responses[i]).unwrap(), &mut expected);
        }
        assert!(close(&g.grad, &expected, 1e-15));
    }

    #[test]
    fn kl_pg_at_reference_is_reward_reinforce() {
        let env = random_env(4, 2, 3, 1.0).unwrap();
        let p = SoftmaxPolicy::from_ref(&env);
        let b = SampleBatch::new(&env, 1, vec![0, 2, 1], Behavior::BehaviorMu).unwrap();
        let kl = kl_pg_offpolicy_grad(&p, &env, 0.9, &b).unwrap();
        let plain = rloo_grad(&p, &env, 0.0, &b).unwrap();
        assert!(close(&kl.grad, &plain.grad, 1e-15));
    }

    #[test]
    fn kl_pg_differs_from_agro_only_in_regularizer() {
        let env = random_env(6, 1, 4, 1.0).unwrap();
        let p = SoftmaxPolicy::new(1, 4, vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let beta = 0.4;
        for b in [vec![0, 1, 2], vec![3, 3, 1, 0]] {
            let batch = SampleBatch::new(&env, 0, b, Behavior::OnPolicy).unwrap();
            let agro = off_policy_agro_grad(&p, &env, beta, &batch).unwrap();
            let klpg = kl_pg_offpolicy_grad(&p, &env, beta, &batch).unwrap();
            let plain = rloo_grad(&p, &env, 0.0, &batch).unwrap();
            // -agro/beta = reward part - beta * (regularizer of AGRO)
            let agro_reg: Vec<f64> = agro.grad.iter().zip(&plain.grad).map(|(a, r)| -a / beta - r).collect();
            let kl_reg: Vec<f64> = klpg.grad.iter().zip(&plain.grad).map(|(k, r)| k - r).collect();
            assert!(!close(&agro_reg, &kl_reg, 1e-6));
        }
    }

    #[test]
    fn contrastive_pair_cases() {
        let env = canonical_env();
        let p = SoftmaxPolicy::new(1, 2, vec![0.2, -0.3]).unwrap();
        assert!(contrastive_pair_grad(&p, &env, 1.0, 0, 1, 1).unwrap().norm() < 1e-15);
        let star = oracle::optimal_policy(&env, 0.7).unwrap();
        assert!(contrastive_pair_grad(&star.pi_star, &env, 0.7, 0, 0, 1).unwrap().norm() < 1e-9);
    }

    #[test]
    fn value_joint_hand_values() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let (g, dv) = value_joint_grad(&p, &ValueHead::zeros(1), &env, 1.0, 0, 0).unwrap();
        assert_eq!(dv, -2.0);
        assert!(close(&g.grad, &[-1.0, 1.0], 1e-15));
        let v = ValueHead { v: vec![1.0] };
        let (g, dv) = value_joint_grad(&p, &v, &env, 1.0, 0, 0).unwrap();
        assert_eq!(dv, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn value_joint_vanishes_at_optimum() {
        let env = random_env(8, 2, 3, 1.0).unwrap();
        let star = oracle::optimal_policy(&env, 0.5).unwrap();
        let v = ValueHead { v: star.tilde_v.clone() };
        for x in 0..2 {
            for y in 0..3 {
                let (g, dv) = value_joint_grad(&star.pi_star, &v, &env, 0.5, x, y).unwrap();
                assert!(g.norm() < 1e-9 && dv.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn value_joint_matches_finite_differences() {
        let env = random_env(9, 2, 3, 1.0).unwrap();
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, 0.5, -0.2, 0.0, 0.3, 0.7]).unwrap();
        let v = ValueHead { v: vec![0.2, -0.1] };
        let beta = 0.6;
        let loss = |p: &SoftmaxPolicy, v: &ValueHead, x: usize, y: usize| {
            let res = env.reward(x, y) - v.v[x] - beta * (p.logprob(x, y).unwrap() - env.ref_logprob(x, y));
            res * res
        };
        let h = 1e-5;
        let (g, dv) = value_joint_grad(&p, &v, &env, beta, 1, 2).unwrap();
        for k in 0..6 {
            let mut a = p.clone();
            a.logits_mut()[k] += h;
            let mut b = p.clone();
            b.logits_mut()[k] -= h;
            let fd = (loss(&a, &v, 1, 2) - loss(&b, &v, 1, 2)) / (2.0 * h);
            assert!((fd - g.grad[k]).abs() < 1e-6);
        }
        let mut va = v.clone();
        va.v[1] += h;
        let mut vb = v.clone();
        vb.v[1] -= h;
        assert!(((loss(&p, &va, 1, 2) - loss(&p, &vb, 1, 2)) / (2.0 * h) - dv).abs() < 1e-6);
    }

    #[test]
    fn unknown_estimator_key_lists_valid_keys() {
        let err = "ppo".parse::<Estimator>().unwrap_err().to_string();
        assert!(err.contains("off_policy_agro") && err.contains("kl_pg_offpolicy"));
        for e in Estimator::ALL {
            assert_eq!(e.key().parse::<Estimator>().unwrap(), e);
        }
    }

    proptest! {
        #[test]
        fn contrastive_is_twice_off_policy(
            logits in prop::collection::vec(-2.0f64..2.0, 4),
            seed in 0u64..1000,
            y1 in 0usize..4,
            y2 in 0usize..4,
            beta in 0.05f64..3.0,
        ) {
            let env = random_env(seed, 1, 4, 1.0).unwrap();
            let p = SoftmaxPolicy::new(1, 4, logits).unwrap();
            let pair = contrastive_pair_grad(&p, &env, beta, 0, y1, y2).unwrap();
            let b = SampleBatch::new(&env, 0, vec![y1, y2], Behavior::BehaviorMu).unwrap();
            let off = off_policy_agro_grad(&p, &env, beta, &b).unwrap();
            let twice: Vec<f64> = off.grad.iter().map(|g| 2.0 * g).collect();
            prop_assert!(close(&pair.grad, &twice, 1e-12));
        }

        #[test]
        fn rloo_is_scaled_off_policy(
            logits in prop::collection::vec(-2.0f64..2.0, 3),
            seed in 0u64..1000,
            ys in prop::collection::vec(0usize..3, 2..6),
            beta in 0.05f64..3.0,
        ) {
            let env = random_env(seed, 1, 3, 1.0).unwrap();
            let p = SoftmaxPolicy::new(1, 3, logits).unwrap();
            let b = SampleBatch::new(&env, 0, ys, Behavior::OnPolicy).unwrap();
            let off = off_policy_agro_grad(&p, &env, beta, &b).unwrap();
            let rloo = rloo_grad(&p, &env, beta, &b).unwrap();
            let scaled: Vec<f64> = off.grad.iter().map(|g| -g / beta).collect();
            prop_assert!(close(&rloo.grad, &scaled, 1e-12));
        }
    }
}
