//! Token-level estimators of the KL gradient on binary sequences of length 4:
//! trace covariance per estimator, the paired ordering tests, and the bias of
//! the off-policy form once sequences come from a different policy.
//!
//! `cargo run --release -p agro --example token_variance`

use agro::env::token_env_binary;
use agro::math::max_abs_diff;
use agro::policy::ArPolicy;
use agro::tokenred::{self, TokenEstimator};

const SAMPLES: usize = 100_000;

fn main() -> agro::Result<()> {
    let env = token_env_binary(4, 1.0)?;
    let reference = env.ref_policy();
    let policy = ArPolicy::standard_perturbed(&env);

    for est in TokenEstimator::ALL {
        if est == TokenEstimator::GOff {
            continue;
        }
        let rec = tokenred::variance_harness(est, &policy, &reference, None, SAMPLES, 5)?;
        println!("{:<14} trace cov {:.5e}", est.key(), rec.trace_cov);
    }
    for (lo, hi) in [
        (TokenEstimator::G2, TokenEstimator::G1),
        (TokenEstimator::G3, TokenEstimator::G2),
        (TokenEstimator::GSqReduced, TokenEstimator::GSqNaive),
    ] {
        let c = tokenred::compare_trace_cov(lo, hi, &policy, &reference, SAMPLES, 6)?;
        println!("{lo} vs {hi}: {:.4e} < {:.4e}, z = {:.1}", c.trace_lower, c.trace_higher, c.z);
    }

    // With sequences from the reference instead of the policy, the off-policy
    // weights no longer average to the KL gradient.
    let target = tokenred::exact_kl_grad(&policy, &reference)?;
    let on = tokenred::exact_expectation(TokenEstimator::GOff, &policy, &reference, &policy)?;
    let off = tokenred::exact_expectation(TokenEstimator::GOff, &policy, &reference, &reference)?;
    println!("g_off sampled from pi:     max |E - grad KL| = {:.1e}", max_abs_diff(&on, &target));
    println!("g_off sampled from pi_ref: max |E - grad KL| = {:.1e}", max_abs_diff(&off, &target));
    Ok(())
}
