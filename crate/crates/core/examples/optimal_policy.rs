//! Closed-form optimum of the KL-regularized objective and the consistency
//! property: at `pi*` the regularized reward is the same for every response.
//!
//! `cargo run -p agro --example optimal_policy`

use agro::env::{canonical_env, random_env};
use agro::grad::regularized_reward;
use agro::oracle;

fn main() -> agro::Result<()> {
    for (label, env) in [("canonical", canonical_env()), ("random 2x4", random_env(5, 2, 4, 1.0)?)] {
        for beta in [0.1, 1.0, 10.0] {
            let opt = oracle::optimal_policy(&env, beta)?;
            println!("{label}, beta = {beta}");
            for x in 0..env.num_prompts() {
                let probs = opt.pi_star.probs(x);
                let rewards: Vec<f64> = (0..env.num_responses())
                    .map(|y| regularized_reward(&opt.pi_star, &env, beta, x, y))
                    .collect::<agro::Result<_>>()?;
                let spread = rewards.iter().map(|r| (r - opt.tilde_v[x]).abs()).fold(0.0, f64::max);
                println!(
                    "  x={x} pi* = {:.4?}  V~ = {:.6}  max |R - V~| = {spread:.1e}",
                    probs, opt.tilde_v[x]
                );
            }
            let g_star = oracle::objective_g(&opt.pi_star, &env, beta)?;
            println!("  G(pi*) = {g_star:.6}  L(pi*) = {:.1e}", oracle::loss_l(&opt.pi_star, &env, beta, None)?);
        }
    }
    Ok(())
}
