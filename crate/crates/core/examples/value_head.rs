//! Single-sample variant with a learned value per prompt: joint exact descent
//! on `(pi, V)` recovers both `pi*` and the log-partition value.
//!
//! `cargo run --release -p agro --example value_head`

use agro::env::{canonical_env, random_env};
use agro::oracle;
use agro::policy::SoftmaxPolicy;
use agro::trainer::exact_value_descent;

fn main() -> agro::Result<()> {
    for (label, env) in [("canonical", canonical_env()), ("random 3x4", random_env(8, 3, 4, 1.0)?)] {
        let beta = 1.0;
        let mu = SoftmaxPolicy::from_ref(&env);
        let out = exact_value_descent(&env, beta, &mu, 0.5, 200_000, 1e-12)?;
        let opt = oracle::optimal_policy(&env, beta)?;
        let kl = oracle::kl_metrics(&out.policy, &env, beta)?.kl_to_star;
        let v_err = out
            .value
            .v
            .iter()
            .zip(&opt.tilde_v)
            .map(|(v, t)| (v - t).abs())
            .fold(0.0, f64::max);
        println!(
            "{label}: {} steps, loss {:.1e}, KL(pi, pi*) {kl:.1e}, max |V - V~| {v_err:.1e}",
            out.steps, out.loss
        );
    }
    Ok(())
}
