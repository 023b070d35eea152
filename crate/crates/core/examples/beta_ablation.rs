//! RLOO on the canonical bandit with a shared seed across beta values, from
//! `configs/beta_ablation.json`. Larger beta keeps the policy closer to the
//! reference.
//!
//! `cargo run --release -p agro --example beta_ablation`

use agro::trainer::{beta_sweep, RunConfig};

fn main() -> agro::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../../../configs/beta_ablation.json"))?;
    for entry in beta_sweep(&cfg, &[1e-2, 1e-1, 1.0])? {
        match entry.last() {
            Some(r) => println!(
                "beta {:<5} kl_to_ref {:.4}  objective_G {:.4}  mean reward {:.3}",
                entry.beta, r.kl_to_ref, r.objective_g, r.mean_train_reward
            ),
            None => println!("beta {:<5} failed: {}", entry.beta, entry.error.unwrap_or_default()),
        }
    }
    Ok(())
}
