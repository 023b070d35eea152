//! Property suites behind `agro-lab verify`.
//!
//! Each check reports the observed error (or statistic) next to its
//! tolerance. Seeds are fixed so reruns print identical tables.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{canonical_env, random_env, token_env_binary, TabularEnv};
use crate::error::{Error, Result};
use crate::grad::{contrastive_pair_grad, off_policy_agro_grad, regularized_reward, Behavior, Estimator, SampleBatch};
use crate::math::{max_abs_diff, norm};
use crate::oracle::{self, GradKind};
use crate::policy::{ArPolicy, SoftmaxPolicy};
use crate::stats::Z_99_ONE_SIDED;
use crate::tokenred::{self, TokenEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Theorems,
    Estimators,
    Tokenred,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorems" => Ok(Suite::Theorems),
            "estimators" => Ok(Suite::Estimators),
            "tokenred" => Ok(Suite::Tokenred),
            "all" => Ok(Suite::All),
            other => Err(Error::config(
                "suite",
                format!("unknown suite `{other}`; valid: theorems, estimators, tokenred, all"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub tolerance: String,
    pub observed: f64,
    pub passed: bool,
}

impl Check {
    fn below(suite: &'static str, name: impl Into<String>, observed: f64, tol: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            tolerance: format!("< {tol:.0e}"),
            observed,
            passed: observed < tol,
        }
    }

    fn above(suite: &'static str, name: impl Into<String>, observed: f64, tol: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            tolerance: format!("> {tol:.0e}"),
            observed,
            passed: observed > tol,
        }
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.extend(theorems()?);
    }
    if matches!(suite, Suite::Estimators | Suite::All) {
        out.extend(estimators()?);
    }
    if matches!(suite, Suite::Tokenred | Suite::All) {
        out.extend(token_estimators()?);
    }
    Ok(out)
}

pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:<width$} {:>12} {:>12}  result", "suite", "check", "tolerance", "observed");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<10} {:<width$} {:>12} {:>12.3e}  {}",
            c.suite,
            c.name,
            c.tolerance,
            c.observed,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

const BETAS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

fn theorems() -> Result<Vec<Check>> {
    const S: &str = "theorems";
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut consistency: f64 = 0.0;
    for seed in 0..20 {
        let env = random_env(seed, 3, 4, 1.0)?;
        for beta in BETAS {
            let opt = oracle::optimal_policy(&env, beta)?;
            for x in 0..env.num_prompts() {
                for y in 0..env.num_responses() {
                    let r = regularized_reward(&opt.pi_star, &env, beta, x, y)?;
                    consistency = consistency.max((r - opt.tilde_v[x]).abs());
                }
            }
        }
    }
    checks.push(Check::below(S, "regularized reward constant at optimum", consistency, 1e-9));

    let env = random_env(11, 3, 4, 1.0)?;
    let beta = 0.5;
    let opt = oracle::optimal_policy(&env, beta)?;
    let mu = SoftmaxPolicy::random(3, 4, 1.0, &mut rng)?;
    let at_opt = oracle::loss_l(&opt.pi_star, &env, beta, None)?.max(oracle::loss_l(&opt.pi_star, &env, beta, Some(&mu))?);
    checks.push(Check::below(S, "losses vanish at optimum", at_opt, 1e-12));

    let mut min_loss = f64::INFINITY;
    let mut identity: f64 = 0.0;
    let g_star = oracle::objective_g(&opt.pi_star, &env, beta)?;
    for _ in 0..100 {
        let pi = SoftmaxPolicy::random(3, 4, 1.0, &mut rng)?;
        let m = oracle::kl_metrics(&pi, &env, beta)?;
        if m.kl_to_star > 1e-4 {
            min_loss = min_loss
                .min(oracle::loss_l(&pi, &env, beta, None)?)
                .min(oracle::loss_l(&pi, &env, beta, Some(&mu))?);
        }
        let gap = g_star - oracle::objective_g(&pi, &env, beta)?;
        identity = identity.max((beta * m.kl_to_star - gap).abs());
    }
    checks.push(Check::above(S, "losses positive away from optimum", min_loss, 0.0));
    checks.push(Check::below(S, "beta*KL(pi,pi*) = G(pi*) - G(pi)", identity, 1e-10));

    let mut dpo: f64 = 0.0;
    for seed in 0..5 {
        let env = random_env(100 + seed, 2, 4, 1.0)?;
        let opt = oracle::optimal_policy(&env, 0.3)?;
        for x in 0..2 {
            for y in 0..4 {
                for y2 in 0..4 {
                    if y != y2 {
                        dpo = dpo.max(oracle::dpo_residual(&opt.pi_star, &env, 0.3, x, y, y2)?.abs());
                    }
                }
            }
        }
    }
    checks.push(Check::below(S, "pairwise residual zero at optimum", dpo, 1e-9));

    let token_env = token_env_binary(3, 1.0)?;
    let telescoping = oracle::token_consistency_error(&token_env, 0.1)?.max(oracle::token_consistency_error(&token_env, 1.0)?);
    checks.push(Check::below(S, "token-level value telescoping", telescoping, 1e-9));

    let (pd_slope, lr_slope) = beta_scaling()?;
    checks.push(Check::below(S, "|slope(‖PD‖ vs beta) - 2|", (pd_slope - 2.0).abs(), 0.3));
    checks.push(Check::below(S, "|slope(‖LR‖ vs beta) - 2|", (lr_slope - 2.0).abs(), 0.3));

    let env = random_env(12, 1, 3, 1.0)?;
    let pi = SoftmaxPolicy::new(1, 3, vec![0.2, -0.5, 0.8])?;
    let mu = SoftmaxPolicy::from_ref(&env);
    checks.push(Check::below(
        S,
        "mean baseline term zero on-policy",
        norm(&oracle::baseline_term(&pi, &env, 0.5, &pi)?),
        1e-10,
    ));
    checks.push(Check::above(
        S,
        "mean baseline term nonzero off-policy",
        norm(&oracle::baseline_term(&pi, &env, 0.5, &mu)?),
        1e-6,
    ));

    checks.push(Check::below(S, "exact gradients vs finite differences", finite_difference_audit(10, 77)?, 1e-6));
    Ok(checks)
}

/// The fixed-perturbation protocol: small rewards keep `pi*(beta)` interior
/// across `beta in [1e-3, 1]`.
pub fn beta_scaling() -> Result<(f64, f64)> {
    let env = random_env(5, 2, 3, 1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = SoftmaxPolicy::random(2, 3, 1.0, &mut rng)?;
    let n = norm(raw.logits());
    let delta: Vec<f64> = raw.logits().iter().map(|v| 0.1 * v / n).collect();
    let betas: Vec<f64> = (0..13).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect();
    oracle::grad_scaling_slopes(&env, &betas, &delta)
}

/// Largest gap between exact `∇G`, `∇L`, `∇L_mu` and central differences
/// (step `1e-5`) over `count` random policies.
pub fn finite_difference_audit(count: usize, seed: u64) -> Result<f64> {
    let env = random_env(seed, 2, 3, 1.0)?;
    let beta = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = SoftmaxPolicy::random(2, 3, 1.0, &mut rng)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let pi = SoftmaxPolicy::random(2, 3, 1.0, &mut rng)?;
        let exact = [
            oracle::exact_grad(GradKind::G, &pi, &env, beta, None)?.grad,
            oracle::exact_grad(GradKind::LOn, &pi, &env, beta, None)?.grad,
            oracle::exact_grad(GradKind::LOff, &pi, &env, beta, Some(&mu))?.grad,
        ];
        for k in 0..pi.param_dim() {
            let mut plus = pi.clone();
            plus.logits_mut()[k] += h;
            let mut minus = pi.clone();
            minus.logits_mut()[k] -= h;
            let fd = [
                (oracle::objective_g(&plus, &env, beta)? - oracle::objective_g(&minus, &env, beta)?) / (2.0 * h),
                (oracle::loss_l(&plus, &env, beta, None)? - oracle::loss_l(&minus, &env, beta, None)?) / (2.0 * h),
                (oracle::loss_l(&plus, &env, beta, Some(&mu))? - oracle::loss_l(&minus, &env, beta, Some(&mu))?)
                    / (2.0 * h),
            ];
            for (e, f) in exact.iter().zip(fd) {
                worst = worst.max((e[k] - f).abs());
            }
        }
    }
    Ok(worst)
}

fn estimators() -> Result<Vec<Check>> {
    const S: &str = "estimators";
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let fixtures: Vec<(&str, TabularEnv, usize)> = vec![
        ("canonical n=2", canonical_env(), 2),
        ("random 2x3 n=3", random_env(3, 2, 3, 1.0)?, 3),
        ("random 1x5 n=2", random_env(4, 1, 5, 1.0)?, 2),
    ];
    let beta = 0.6;
    for (label, env, n) in &fixtures {
        let pi = SoftmaxPolicy::random(env.num_prompts(), env.num_responses(), 0.7, &mut rng)?;
        let mu = SoftmaxPolicy::from_ref(env);
        for est in Estimator::ALL {
            // lr_biased is biased by design; reported separately below.
            let Some(target) = oracle::estimator_target(est, &pi, env, beta, &mu)? else {
                continue;
            };
            let mean = oracle::estimator_expectation(est, &pi, env, beta, target.behavior, *n)?;
            checks.push(Check::below(S, format!("E[{est}] exact, {label}"), max_abs_diff(&mean.grad, &target.grad), 1e-10));
        }
    }

    // Three responses with distinct rewards make the biased variant's offset visible.
    let env = TabularEnv::new(1, 3, vec![1.0, 0.0, 0.3], vec![1.0], vec![0.2, 0.5, 0.3])?;
    let pi = SoftmaxPolicy::new(1, 3, vec![0.4, -0.3, 0.1])?;
    let biased = oracle::estimator_expectation(Estimator::LrBiased, &pi, &env, 1.0, None, 3)?;
    let lr = oracle::exact_grad(GradKind::LOnLr, &pi, &env, 1.0, None)?;
    checks.push(Check::above(S, "lr_biased offset from exact LR part, n=3", max_abs_diff(&biased.grad, &lr.grad), 1e-6));

    let mut pair: f64 = 0.0;
    for seed in 0..5 {
        let env = random_env(200 + seed, 2, 4, 1.0)?;
        let pi = SoftmaxPolicy::random(2, 4, 1.0, &mut rng)?;
        for (y1, y2) in [(0, 1), (2, 3), (1, 3)] {
            let c = contrastive_pair_grad(&pi, &env, 0.8, 1, y1, y2)?;
            let b = SampleBatch::new(&env, 1, vec![y1, y2], Behavior::BehaviorMu)?;
            let twice: Vec<f64> = off_policy_agro_grad(&pi, &env, 0.8, &b)?.grad.iter().map(|v| 2.0 * v).collect();
            pair = pair.max(max_abs_diff(&c.grad, &twice));
        }
    }
    checks.push(Check::below(S, "pair form = 2x off-policy estimator at n=2", pair, 1e-12));
    Ok(checks)
}

fn token_estimators() -> Result<Vec<Check>> {
    const S: &str = "tokenred";
    const SAMPLES: usize = 100_000;
    let mut checks = Vec::new();
    let env = token_env_binary(4, 1.0)?;
    let reference = env.ref_policy();
    let policy = ArPolicy::standard_perturbed(&env);
    for (i, est) in [
        TokenEstimator::G1,
        TokenEstimator::G2,
        TokenEstimator::G3,
        TokenEstimator::GSqNaive,
        TokenEstimator::GSqReduced,
    ]
    .into_iter()
    .enumerate()
    {
        let rec = tokenred::variance_harness(est, &policy, &reference, None, SAMPLES, 900 + i as u64)?;
        let target = tokenred::exact_target(est, &policy, &reference)?;
        let worst_z = rec
            .mean
            .iter()
            .zip(&target)
            .zip(&rec.std_errors)
            .map(|((m, t), se)| if *se > 0.0 { (m - t).abs() / se } else { (m - t).abs() * 1e12 })
            .fold(0.0, f64::max);
        checks.push(Check::below(S, format!("{est} mean within 5 SE (max |z|)"), worst_z, 5.0));
    }
    for (lower, higher, seed) in [
        (TokenEstimator::G2, TokenEstimator::G1, 1),
        (TokenEstimator::G3, TokenEstimator::G2, 2),
        (TokenEstimator::GSqReduced, TokenEstimator::GSqNaive, 3),
    ] {
        let c = tokenred::compare_trace_cov(lower, higher, &policy, &reference, SAMPLES, seed)?;
        checks.push(Check {
            suite: S,
            name: format!("tr cov {lower} < {higher} (one-sided z, 99%)"),
            tolerance: format!("> {Z_99_ONE_SIDED:.3}"),
            observed: c.z,
            passed: c.significant_99,
        });
    }
    let mut cross: f64 = 0.0;
    for t in 0..4 {
        for t2 in 0..t {
            cross = cross.max(norm(&tokenred::cross_term_expectation(&policy, &reference, t, t2)?));
        }
    }
    checks.push(Check::below(S, "lower-triangular pairs have zero mean", cross, 1e-10));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn theorem_suite_passes() {
        let checks = run(Suite::Theorems).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{}", render_table(&checks));
    }

    #[test]
    fn estimator_suite_passes() {
        let checks = run(Suite::Estimators).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{}", render_table(&checks));
        assert!(checks.len() >= 3 * 6);
    }
}
