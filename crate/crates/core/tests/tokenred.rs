//! Token-level estimators against exact expectations over all sequences.

use agro::env::{token_env_binary, SeqShape};
use agro::math::max_abs_diff;
use agro::policy::ArPolicy;
use agro::tokenred::{self, TokenEstimator};
use proptest::prelude::*;

fn random_pair(horizon: usize, logits: &[f64]) -> (ArPolicy, ArPolicy) {
    let shape = SeqShape::new(2, horizon, 1 << 16).unwrap();
    let dim = shape.param_dim();
    let policy = ArPolicy::from_logits(shape, logits[..dim].to_vec()).unwrap();
    let reference = ArPolicy::from_logits(shape, logits[dim..2 * dim].to_vec()).unwrap();
    (policy, reference)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn on_policy_estimators_unbiased(
        horizon in 1usize..5,
        logits in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let (policy, reference) = random_pair(horizon, &logits);
        for est in TokenEstimator::ALL {
            let target = tokenred::exact_target(est, &policy, &reference).unwrap();
            let mean = tokenred::exact_expectation(est, &policy, &reference, &policy).unwrap();
            prop_assert!(max_abs_diff(&mean, &target) < 1e-10, "{est}");
        }
    }

    #[test]
    fn squared_variants_share_their_mean(
        horizon in 1usize..5,
        logits in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let (policy, reference) = random_pair(horizon, &logits);
        let naive = tokenred::exact_expectation(TokenEstimator::GSqNaive, &policy, &reference, &policy).unwrap();
        let reduced = tokenred::exact_expectation(TokenEstimator::GSqReduced, &policy, &reference, &policy).unwrap();
        prop_assert!(max_abs_diff(&naive, &reduced) < 1e-10);
    }
}

#[test]
fn off_policy_form_is_biased_under_another_sampler() {
    let env = token_env_binary(4, 1.0).unwrap();
    let reference = env.ref_policy();
    let policy = ArPolicy::standard_perturbed(&env);
    let target = tokenred::exact_kl_grad(&policy, &reference).unwrap();
    let from_ref = tokenred::exact_expectation(TokenEstimator::GOff, &policy, &reference, &reference).unwrap();
    assert!(max_abs_diff(&from_ref, &target) > 1e-3);
}

#[test]
fn harness_is_seed_deterministic() {
    let env = token_env_binary(3, 1.0).unwrap();
    let reference = env.ref_policy();
    let policy = ArPolicy::standard_perturbed(&env);
    let a = tokenred::variance_harness(TokenEstimator::G3, &policy, &reference, None, 500, 4).unwrap();
    let b = tokenred::variance_harness(TokenEstimator::G3, &policy, &reference, None, 500, 4).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.trace_cov, b.trace_cov);
}

#[test]
fn harness_rejects_single_sample() {
    let env = token_env_binary(2, 1.0).unwrap();
    let reference = env.ref_policy();
    assert!(tokenred::variance_harness(TokenEstimator::G1, &reference, &reference, None, 1, 0).is_err());
}
