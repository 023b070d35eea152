//! Exact ground truth by enumeration.
//!
//! Everything here sums closed-form expressions over all prompts and
//! responses (or all sample tuples / token sequences), so the results are
//! exact up to floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::env::{TabularEnv, TokenEnv, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::grad::{Behavior, Estimator, SampleBatch, ValueHead};
use crate::math::{axpy, kl_from_logs, logsumexp, norm};
use crate::policy::{add_score, ArPolicy, GradEstimate, SoftmaxPolicy};

fn require_positive_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "beta must be > 0 for the optimal policy to exist, got {beta}"
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

/// The optimal regularized policy together with its log-partition values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub pi_star: SoftmaxPolicy,
    /// `beta * log sum_y pi_ref(y|x) exp(r(x,y)/beta)` per prompt.
    pub tilde_v: Vec<f64>,
    pub beta: f64,
}

/// `pi*(y|x) ∝ pi_ref(y|x) exp(r(x,y)/beta)`.
pub fn optimal_policy(env: &TabularEnv, beta: f64) -> Result<OptimalSolution> {
    require_positive_beta(beta)?;
    let mut logits = Vec::with_capacity(env.param_dim());
    let mut tilde_v = Vec::with_capacity(env.num_prompts());
    for x in 0..env.num_prompts() {
        let row: Vec<f64> = env
            .ref_log_prob_row(x)
            .iter()
            .zip(env.reward_row(x))
            .map(|(lr, r)| lr + r / beta)
            .collect();
        tilde_v.push(beta * logsumexp(&row));
        logits.extend(row);
    }
    Ok(OptimalSolution {
        pi_star: SoftmaxPolicy::new(env.num_prompts(), env.num_responses(), logits)?,
        tilde_v,
        beta,
    })
}

/// Regularized rewards `R(x, .)` of one prompt.
fn reg_row(env: &TabularEnv, beta: f64, x: usize, log_probs: &[f64]) -> Vec<f64> {
    env.reward_row(x)
        .iter()
        .zip(log_probs.iter().zip(env.ref_log_prob_row(x)))
        .map(|(r, (lp, lr))| r - beta * (lp - lr))
        .collect()
}

fn mean(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

/// `E_rho[E_pi r - beta KL(pi, pi_ref)]`.
pub fn objective_g(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64) -> Result<f64> {
    require_nonnegative_beta(beta)?;
    policy.check_matches(env)?;
    let mut total = 0.0;
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        total += w * mean(&probs, &reg_row(env, beta, x, &lp));
    }
    Ok(total)
}

fn sampling_probs(policy: &SoftmaxPolicy, mu: Option<&SoftmaxPolicy>, x: usize) -> Vec<f64> {
    mu.unwrap_or(policy).probs(x)
}

fn check_mu(mu: Option<&SoftmaxPolicy>, env: &TabularEnv) -> Result<()> {
    if let Some(m) = mu {
        m.check_matches(env)?;
    }
    Ok(())
}

/// `1/2 E_rho[Var_{y~mu}(R(x, y))]`; `mu = None` means on-policy.
pub fn loss_l(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, mu: Option<&SoftmaxPolicy>) -> Result<f64> {
    require_nonnegative_beta(beta)?;
    policy.check_matches(env)?;
    check_mu(mu, env)?;
    let mut total = 0.0;
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let reg = reg_row(env, beta, x, &lp);
        let m = sampling_probs(policy, mu, x);
        let avg = mean(&m, &reg);
        let var: f64 = m.iter().zip(&reg).map(|(p, r)| p * (r - avg) * (r - avg)).sum();
        total += 0.5 * w * var;
    }
    Ok(total)
}

/// Which exact gradient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradKind {
    /// Gradient of the regularized objective (ascent direction).
    G,
    /// Full on-policy loss gradient, pathwise plus likelihood-ratio parts.
    LOn,
    /// Pathwise-derivative part of the on-policy gradient.
    LOnPd,
    /// Likelihood-ratio part of the on-policy gradient.
    LOnLr,
    /// Off-policy loss gradient under `mu`.
    LOff,
}

impl GradKind {
    fn label(self) -> &'static str {
        match self {
            GradKind::G => "exact_g",
            GradKind::LOn => "exact_l_on",
            GradKind::LOnPd => "exact_l_on_pd",
            GradKind::LOnLr => "exact_l_on_lr",
            GradKind::LOff => "exact_l_off",
        }
    }
}

/// The two parts of the on-policy loss gradient and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradParts {
    pub pd: Vec<f64>,
    pub lr: Vec<f64>,
    pub total: Vec<f64>,
}

/// Exact `∇_PD L`, `∇_LR L` and `∇L` for the on-policy loss.
pub fn exact_loss_grad_parts(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64) -> Result<LossGradParts> {
    require_positive_beta(beta)?;
    policy.check_matches(env)?;
    let dim = policy.param_dim();
    let (mut pd, mut lr) = (vec![0.0; dim], vec![0.0; dim]);
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let reg = reg_row(env, beta, x, &lp);
        let avg = mean(&probs, &reg);
        for y in 0..env.num_responses() {
            let dev = reg[y] - avg;
            add_score(&probs, x, y, -beta * w * probs[y] * dev, &mut pd);
            add_score(&probs, x, y, 0.5 * w * probs[y] * dev * dev, &mut lr);
        }
    }
    let total = pd.iter().zip(&lr).map(|(a, b)| a + b).collect();
    Ok(LossGradParts { pd, lr, total })
}

/// Exact gradients by enumeration over prompts and responses.
pub fn exact_grad(
    kind: GradKind,
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    mu: Option<&SoftmaxPolicy>,
) -> Result<GradEstimate> {
    policy.check_matches(env)?;
    check_mu(mu, env)?;
    let dim = policy.param_dim();
    let grad = match kind {
        GradKind::G => {
            require_nonnegative_beta(beta)?;
            let mut g = vec![0.0; dim];
            for (x, &w) in env.prompt_weights().iter().enumerate() {
                let lp = policy.log_probs(x);
                let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let reg = reg_row(env, beta, x, &lp);
                let avg = mean(&probs, &reg);
                for y in 0..env.num_responses() {
                    add_score(&probs, x, y, w * probs[y] * (reg[y] - avg), &mut g);
                }
            }
            g
        }
        GradKind::LOff => {
            require_positive_beta(beta)?;
            let mut g = vec![0.0; dim];
            for (x, &w) in env.prompt_weights().iter().enumerate() {
                let lp = policy.log_probs(x);
                let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let m = sampling_probs(policy, mu, x);
                let reg = reg_row(env, beta, x, &lp);
                let avg = mean(&m, &reg);
                for y in 0..env.num_responses() {
                    add_score(&probs, x, y, -beta * w * m[y] * (reg[y] - avg), &mut g);
                }
            }
            g
        }
        GradKind::LOn => exact_loss_grad_parts(policy, env, beta)?.total,
        GradKind::LOnPd => exact_loss_grad_parts(policy, env, beta)?.pd,
        GradKind::LOnLr => exact_loss_grad_parts(policy, env, beta)?.lr,
    };
    Ok(GradEstimate::new(kind.label(), grad, 0, beta))
}

/// `E_{y~mu}[R_bar_mu(x) * score(y)]` per prompt, weighted by `rho`. Zero
/// when `mu = pi`; in general it is not.
pub fn baseline_term(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, mu: &SoftmaxPolicy) -> Result<Vec<f64>> {
    require_nonnegative_beta(beta)?;
    policy.check_matches(env)?;
    mu.check_matches(env)?;
    let mut g = vec![0.0; policy.param_dim()];
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let m = mu.probs(x);
        let avg = mean(&m, &reg_row(env, beta, x, &lp));
        for y in 0..env.num_responses() {
            add_score(&probs, x, y, w * m[y] * avg, &mut g);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlMetrics {
    pub kl_to_star: f64,
    pub kl_to_ref: f64,
    /// `kl_to_star / KL(pi_ref, pi*)`; equals `kl_to_star` when `pi_ref` is
    /// already optimal.
    pub normalized_kl: f64,
}

/// `E_rho[KL(pi(.|x) || other(.|x))]` with `other` given as log-prob rows.
fn expected_kl(policy: &SoftmaxPolicy, env: &TabularEnv, other: impl Fn(usize) -> Vec<f64>) -> f64 {
    env.prompt_weights()
        .iter()
        .enumerate()
        .map(|(x, &w)| w * kl_from_logs(&policy.log_probs(x), &other(x)))
        .sum()
}

pub fn kl_metrics(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64) -> Result<KlMetrics> {
    policy.check_matches(env)?;
    let star = optimal_policy(env, beta)?;
    let kl_to_star = expected_kl(policy, env, |x| star.pi_star.log_probs(x));
    let kl_to_ref = expected_kl(policy, env, |x| env.ref_log_prob_row(x).to_vec());
    let reference = SoftmaxPolicy::from_ref(env);
    let denom = expected_kl(&reference, env, |x| star.pi_star.log_probs(x));
    let normalized_kl = if denom > 0.0 { kl_to_star / denom } else { kl_to_star };
    Ok(KlMetrics {
        kl_to_star,
        kl_to_ref,
        normalized_kl,
    })
}

/// Expectation of `f(batch)` over every `n`-tuple of responses drawn i.i.d.
/// from `sampler`, and over prompts from `rho`.
pub fn enumerate_batches<F>(
    sampler: &SoftmaxPolicy,
    env: &TabularEnv,
    n: usize,
    behavior: Behavior,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&SampleBatch) -> Result<Vec<f64>>,
{
    sampler.check_matches(env)?;
    let k = env.num_responses();
    let required = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if required > DEFAULT_ENUMERATION_CAP as u128 {
        return Err(Error::Capacity {
            required,
            cap: DEFAULT_ENUMERATION_CAP,
        });
    }
    let mut acc: Option<Vec<f64>> = None;
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let probs = sampler.probs(x);
        for code in 0..required as usize {
            let mut c = code;
            let mut responses = Vec::with_capacity(n);
            let mut p = w;
            for _ in 0..n {
                let y = c % k;
                c /= k;
                p *= probs[y];
                responses.push(y);
            }
            let batch = SampleBatch::new(env, x, responses, behavior)?;
            let v = f(&batch)?;
            let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
            axpy(p, &v, a);
        }
    }
    acc.ok_or_else(|| Error::invalid("nothing to enumerate"))
}

/// Exact expected value of a stochastic estimator: responses from `mu`
/// (or from the policy itself when `mu` is `None`).
pub fn estimator_expectation(
    estimator: Estimator,
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    mu: Option<&SoftmaxPolicy>,
    n: usize,
) -> Result<GradEstimate> {
    if n < 2 {
        return Err(Error::invalid("leave-one-out estimators need n >= 2"));
    }
    let behavior = if mu.is_some() { Behavior::BehaviorMu } else { Behavior::OnPolicy };
    let sampler = mu.unwrap_or(policy);
    let grad = enumerate_batches(sampler, env, n, behavior, |b| {
        Ok(estimator.estimate(policy, env, beta, b)?.grad)
    })?;
    Ok(GradEstimate::new(format!("E[{}]", estimator.key()), grad, n, beta))
}

/// What an estimator is unbiased for, and which responses it consumes.
#[derive(Debug, Clone)]
pub struct EstimatorTarget<'a> {
    /// Behavior policy the batches come from; `None` means on-policy.
    pub behavior: Option<&'a SoftmaxPolicy>,
    pub grad: Vec<f64>,
}

/// Exact quantity each estimator targets when off-policy estimators sample
/// from `mu`. `None` for `lr_biased`, which has no unbiased target.
pub fn estimator_target<'a>(
    estimator: Estimator,
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    mu: &'a SoftmaxPolicy,
) -> Result<Option<EstimatorTarget<'a>>> {
    let (behavior, grad) = match estimator {
        Estimator::OffPolicyAgro => (Some(mu), exact_grad(GradKind::LOff, policy, env, beta, Some(mu))?.grad),
        Estimator::Pd => (None, exact_grad(GradKind::LOnPd, policy, env, beta, None)?.grad),
        Estimator::Lr => (None, exact_grad(GradKind::LOnLr, policy, env, beta, None)?.grad),
        Estimator::OnPolicyAgro => (None, exact_grad(GradKind::LOn, policy, env, beta, None)?.grad),
        Estimator::Rloo => (None, exact_grad(GradKind::G, policy, env, beta, None)?.grad),
        Estimator::KlPg => {
            let k = env.num_responses();
            let dir = expected_klpg_direction(policy, env, beta, mu)?;
            let weighted = dir.iter().enumerate().map(|(i, g)| env.prompt_weights()[i / k] * g).collect();
            (Some(mu), weighted)
        }
        Estimator::LrBiased => return Ok(None),
    };
    Ok(Some(EstimatorTarget { behavior, grad }))
}

/// Closed-form expectation of the KL-regularized policy gradient with
/// responses from `mu`: `mu_k (r_k - r_bar_mu) - beta * pi_k (log(pi_k/ref_k) - KL)`
/// per prompt, unweighted by `rho`.
pub fn expected_klpg_direction(policy: &SoftmaxPolicy, env: &TabularEnv, beta: f64, mu: &SoftmaxPolicy) -> Result<Vec<f64>> {
    policy.check_matches(env)?;
    mu.check_matches(env)?;
    let mut g = Vec::with_capacity(policy.param_dim());
    for x in 0..env.num_prompts() {
        g.extend(klpg_row_direction(policy.row(x), x, env, beta, &mu.probs(x)));
    }
    Ok(g)
}

fn klpg_row_direction(logits: &[f64], x: usize, env: &TabularEnv, beta: f64, mu_row: &[f64]) -> Vec<f64> {
    let r = env.reward_row(x);
    let r_bar = mean(mu_row, r);
    let lp = crate::math::log_softmax(logits);
    let ratio: Vec<f64> = lp.iter().zip(env.ref_log_prob_row(x)).map(|(a, b)| a - b).collect();
    let kl: f64 = lp.iter().zip(&ratio).map(|(l, q)| l.exp() * q).sum();
    (0..lp.len())
        .map(|j| mu_row[j] * (r[j] - r_bar) - beta * lp[j].exp() * (ratio[j] - kl))
        .collect()
}

/// Per-prompt objective whose gradient is [`expected_klpg_direction`].
fn klpg_objective(logits: &[f64], x: usize, env: &TabularEnv, beta: f64, mu_row: &[f64]) -> f64 {
    let lp = crate::math::log_softmax(logits);
    let r = env.reward_row(x);
    let r_bar = mean(mu_row, r);
    let fit: f64 = (0..lp.len()).map(|j| mu_row[j] * (r[j] - r_bar) * lp[j]).sum();
    fit - beta * kl_from_logs(&lp, env.ref_log_prob_row(x))
}

/// Jacobian of [`klpg_row_direction`] with respect to the row's logits.
fn klpg_row_jacobian(logits: &[f64], x: usize, env: &TabularEnv, beta: f64) -> Vec<f64> {
    let lp = crate::math::log_softmax(logits);
    let k = lp.len();
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let ratio: Vec<f64> = lp.iter().zip(env.ref_log_prob_row(x)).map(|(a, b)| a - b).collect();
    let kl: f64 = p.iter().zip(&ratio).map(|(a, q)| a * q).sum();
    let mut jac = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            let d = p[i] * (delta - p[j]) * (ratio[i] - kl + 1.0) - p[i] * p[j] * (ratio[j] - kl);
            jac[i * k + j] = -beta * d;
        }
    }
    jac
}

/// Newton step for `g(theta) = 0` within the zero-sum subspace of a row.
fn klpg_newton_step(logits: &[f64], g: &[f64], x: usize, env: &TabularEnv, beta: f64) -> Option<Vec<f64>> {
    let k = g.len();
    let mut a = klpg_row_jacobian(logits, x, env, beta);
    // Rows of the Jacobian sum to zero along the all-ones direction; removing
    // that direction makes the system regular and keeps the step zero-sum.
    a.iter_mut().for_each(|v| *v -= 1.0);
    crate::math::solve_linear(a, g.iter().map(|v| -v).collect())
        .filter(|_| k > 0)
}

/// Fixed point of the off-policy KL-regularized policy gradient, one prompt
/// at a time: damped Newton on the expected direction, falling back to exact
/// ascent with backtracking when Newton does not reduce the gradient norm.
///
/// Fails with [`Error::Convergence`] when the iterate runs off to a
/// degenerate policy (no stationary point at finite logits) or the budget is
/// exhausted.
pub fn klpg_stationary_point(env: &TabularEnv, beta: f64, mu: &SoftmaxPolicy) -> Result<SoftmaxPolicy> {
    const TOL: f64 = 1e-10;
    const BUDGET: usize = 1_000_000;
    const MAX_STEP: f64 = 64.0;
    const MIN_STEP: f64 = 1e-20;
    // Logit spread beyond which the policy is numerically a point mass.
    const MAX_SPREAD: f64 = 700.0;
    require_positive_beta(beta)?;
    mu.check_matches(env)?;
    let k = env.num_responses();
    let mut policy = SoftmaxPolicy::from_ref(env);
    for x in 0..env.num_prompts() {
        let mu_row = mu.probs(x);
        let mut row = policy.row(x).to_vec();
        let mut step = 1.0;
        let mut iterations = 0;
        loop {
            let g = klpg_row_direction(&row, x, env, beta, &mu_row);
            let gn = norm(&g);
            if gn < TOL {
                break;
            }
            let spread = row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().copied().fold(f64::INFINITY, f64::min);
            if iterations >= BUDGET || !spread.is_finite() || spread > MAX_SPREAD {
                return Err(Error::Convergence {
                    iterations,
                    grad_norm: gn,
                });
            }
            iterations += 1;

            if let Some(delta) = klpg_newton_step(&row, &g, x, env, beta) {
                let mut t = 1.0;
                let mut accepted = false;
                while t > 1e-6 {
                    let trial: Vec<f64> = row.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
                    if norm(&klpg_row_direction(&trial, x, env, beta, &mu_row)) < (1.0 - 1e-4 * t) * gn {
                        row = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if accepted {
                    continue;
                }
            }

            let f0 = klpg_objective(&row, x, env, beta, &mu_row);
            loop {
                let trial: Vec<f64> = row.iter().zip(&g).map(|(t, d)| t + step * d).collect();
                let f1 = klpg_objective(&trial, x, env, beta, &mu_row);
                let sufficient = f1 >= f0 + 1e-4 * step * gn * gn;
                let flat = (f1 - f0).abs() <= 1e-13 * f0.abs().max(1.0)
                    && norm(&klpg_row_direction(&trial, x, env, beta, &mu_row)) < gn;
                if sufficient || flat {
                    row = trial;
                    step = (step * 2.0).min(MAX_STEP);
                    break;
                }
                step *= 0.5;
                if step < MIN_STEP {
                    return Err(Error::Convergence {
                        iterations,
                        grad_norm: gn,
                    });
                }
            }
        }
        policy.logits_mut()[x * k..(x + 1) * k].copy_from_slice(&row);
    }
    Ok(policy)
}

/// `(r(x,y) - r(x,y2)) - beta * (log pi/pi_ref (y) - log pi/pi_ref (y2))`.
pub fn dpo_residual(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    x: usize,
    y: usize,
    y2: usize,
) -> Result<f64> {
    policy.check_matches(env)?;
    env.check_index(x, y)?;
    env.check_index(x, y2)?;
    let lp = policy.log_probs(x);
    let ratio = |j: usize| lp[j] - env.ref_logprob(x, j);
    Ok(env.reward(x, y) - env.reward(x, y2) - beta * (ratio(y) - ratio(y2)))
}

/// `E_rho E_{y~mu}[(r - V(x) - beta log(pi/pi_ref))^2]`.
pub fn value_loss(
    policy: &SoftmaxPolicy,
    value: &ValueHead,
    env: &TabularEnv,
    beta: f64,
    mu: &SoftmaxPolicy,
) -> Result<f64> {
    policy.check_matches(env)?;
    mu.check_matches(env)?;
    let mut total = 0.0;
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let m = mu.probs(x);
        for y in 0..env.num_responses() {
            let res = env.reward(x, y) - value.v[x] - beta * (lp[y] - env.ref_logprob(x, y));
            total += w * m[y] * res * res;
        }
    }
    Ok(total)
}

/// Exact gradient of [`value_loss`] with respect to logits and `V`.
pub fn exact_value_grad(
    policy: &SoftmaxPolicy,
    value: &ValueHead,
    env: &TabularEnv,
    beta: f64,
    mu: &SoftmaxPolicy,
) -> Result<(Vec<f64>, Vec<f64>)> {
    policy.check_matches(env)?;
    mu.check_matches(env)?;
    if value.v.len() != env.num_prompts() {
        return Err(Error::Shape("value head has the wrong number of prompts".into()));
    }
    let mut g = vec![0.0; policy.param_dim()];
    let mut gv = vec![0.0; env.num_prompts()];
    for (x, &w) in env.prompt_weights().iter().enumerate() {
        let lp = policy.log_probs(x);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let m = mu.probs(x);
        for y in 0..env.num_responses() {
            let res = env.reward(x, y) - value.v[x] - beta * (lp[y] - env.ref_logprob(x, y));
            add_score(&probs, x, y, -2.0 * beta * w * m[y] * res, &mut g);
            gv[x] += -2.0 * w * m[y] * res;
        }
    }
    Ok((g, gv))
}

/// Log-log slopes of `‖∇_PD L‖` and `‖∇_LR L‖` against `beta`, each
/// evaluated at `pi*(beta)` with logits shifted by the fixed `delta`.
pub fn grad_scaling_slopes(env: &TabularEnv, betas: &[f64], delta: &[f64]) -> Result<(f64, f64)> {
    if betas.len() < 2 {
        return Err(Error::invalid("need at least two beta values"));
    }
    if delta.len() != env.param_dim() {
        return Err(Error::Shape("perturbation does not match the policy".into()));
    }
    let (mut lb, mut lpd, mut llr) = (Vec::new(), Vec::new(), Vec::new());
    for &beta in betas {
        let mut pi = optimal_policy(env, beta)?.pi_star;
        axpy(1.0, delta, pi.logits_mut());
        let parts = exact_loss_grad_parts(&pi, env, beta)?;
        lb.push(beta.ln());
        lpd.push(norm(&parts.pd).ln());
        llr.push(norm(&parts.lr).ln());
    }
    Ok((crate::math::ols_slope(&lb, &lpd), crate::math::ols_slope(&lb, &llr)))
}

/// Token-level optimal policy and regularized values for every prefix.
#[derive(Debug, Clone)]
pub struct TokenOptimal {
    /// Indexed by [`crate::env::SeqShape::node`]; zero at full-length prefixes.
    pub values: Vec<f64>,
    pub pi_star: ArPolicy,
    pub beta: f64,
}

/// Backward induction of the regularized value over prefixes.
pub fn token_optimal(env: &TokenEnv, beta: f64) -> Result<TokenOptimal> {
    require_positive_beta(beta)?;
    if !env.has_token_rewards() {
        return Err(Error::Unsupported("per-token rewards are required".into()));
    }
    let shape = env.shape();
    let v = shape.vocab;
    let mut values = vec![0.0; shape.num_nodes()];
    let mut logits = vec![0.0; shape.param_dim()];
    for len in (0..shape.horizon).rev() {
        for code in 0..v.pow(len as u32) {
            let mut prefix = vec![0; len];
            let mut c = code;
            for slot in prefix.iter_mut().rev() {
                *slot = c % v;
                c /= v;
            }
            let row = shape.node(&prefix);
            let refs = env.ref_row(&prefix);
            let mut child = prefix.clone();
            child.push(0);
            let q: Vec<f64> = (0..v)
                .map(|tok| {
                    child[len] = tok;
                    let r = env.token_reward(&prefix, tok).expect("checked above");
                    refs[tok].ln() + (r + values[shape.node(&child)]) / beta
                })
                .collect();
            values[row] = beta * logsumexp(&q);
            logits[row * v..(row + 1) * v].copy_from_slice(&q);
        }
    }
    Ok(TokenOptimal {
        values,
        pi_star: ArPolicy::from_logits(shape, logits)?,
        beta,
    })
}

/// Regularized optimal value of a prefix (zero for full-length prefixes).
pub fn prefix_value(env: &TokenEnv, beta: f64, prefix: &[usize]) -> Result<f64> {
    let shape = env.shape();
    if prefix.len() > shape.horizon || prefix.iter().any(|&t| t >= shape.vocab) {
        return Err(Error::invalid(format!("prefix {prefix:?} is not valid")));
    }
    Ok(token_optimal(env, beta)?.values[shape.node(prefix)])
}

/// Largest violation, over all sequences and position pairs `t < t2`, of
/// `V(y_{<t}) = sum_{s=t}^{t2-1} (r_s - beta log(pi*/pi_ref)(y_s)) + V(y_{<t2})`.
pub fn token_consistency_error(env: &TokenEnv, beta: f64) -> Result<f64> {
    let opt = token_optimal(env, beta)?;
    let shape = env.shape();
    let reference = env.ref_policy();
    let mut worst: f64 = 0.0;
    for seq in shape.sequences() {
        let step: Vec<f64> = (0..seq.len())
            .map(|s| {
                let prefix = &seq[..s];
                let r = env.token_reward(prefix, seq[s]).expect("checked by token_optimal");
                let log_ratio = opt.pi_star.log_probs_at(prefix)[seq[s]] - reference.log_probs_at(prefix)[seq[s]];
                r - beta * log_ratio
            })
            .collect();
        for t in 0..=seq.len() {
            for t2 in t..=seq.len() {
                let lhs = opt.values[shape.node(&seq[..t])];
                let rhs: f64 = step[t..t2].iter().sum::<f64>() + opt.values[shape.node(&seq[..t2])];
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(worst)
}
