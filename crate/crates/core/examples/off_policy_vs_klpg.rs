//! Fixed behavior data (responses from `pi_ref`, beta = 1). Off-policy AGRO
//! still reaches `pi*`; the KL-regularized policy gradient settles elsewhere,
//! or has nowhere to settle at all.
//!
//! `cargo run --release -p agro --example off_policy_vs_klpg`

use agro::cli::figure1_pairs;
use agro::oracle;
use agro::policy::SoftmaxPolicy;
use agro::trainer::train;

fn main() -> agro::Result<()> {
    for pair in figure1_pairs(0)? {
        let env = pair.agro.env.build()?;
        let beta = pair.agro.beta;
        let agro_run = train(&pair.agro, &env)?;
        let klpg_run = train(&pair.klpg, &env)?;
        let a = agro_run.last().expect("records");
        let k = klpg_run.last().expect("records");
        println!("{}", pair.label);
        println!("  off_policy_agro  normalized KL {:.3e} after {} steps", a.normalized_kl.unwrap_or(f64::NAN), a.step);
        println!(
            "  kl_pg_offpolicy  normalized KL {:.3e}, grad norm {:.1e} after {} steps",
            k.normalized_kl.unwrap_or(f64::NAN),
            k.grad_norm,
            k.step
        );
        let mu = SoftmaxPolicy::from_ref(&env);
        match oracle::klpg_stationary_point(&env, beta, &mu) {
            Ok(fixed) => {
                let to_fixed = kl(&klpg_run.policy, &fixed, &env).max(0.0);
                let m = oracle::kl_metrics(&fixed, &env, beta)?;
                println!(
                    "  stationary point: KL(run, fixed) = {to_fixed:.1e}, its normalized KL to pi* = {:.3}",
                    m.normalized_kl
                );
            }
            Err(e) => println!("  stationary point: none ({e})"),
        }
    }
    Ok(())
}

fn kl(p: &SoftmaxPolicy, q: &SoftmaxPolicy, env: &agro::env::TabularEnv) -> f64 {
    (0..env.num_prompts())
        .map(|x| env.prompt_weights()[x] * agro::math::kl_from_logs(&p.log_probs(x), &q.log_probs(x)))
        .sum()
}
