//! Off-policy AGRO on a mix of fresh on-policy batches and replayed ones;
//! each batch comes from the buffer with probability `mix_p`.
//!
//! `cargo run --release -p agro --example replay_mix`

use agro::grad::Estimator;
use agro::trainer::{train, EnvSpec, RunConfig, SamplingMode};

fn main() -> agro::Result<()> {
    let env = EnvSpec::Random {
        seed: 4,
        num_prompts: 3,
        num_responses: 4,
        reward_scale: 1.0,
    };
    println!("{:>6} {:>14} {:>14}", "mix_p", "normalized KL", "kl_to_ref");
    for mix_p in [0.0, 0.25, 0.5, 0.75] {
        let cfg = RunConfig {
            env: env.clone(),
            sampling_mode: SamplingMode::BufferMix,
            mix_p,
            buffer_capacity: 256,
            seed: 3,
            eval_every: 100,
            ..RunConfig::new(Estimator::OffPolicyAgro, 0.5, 3000, 0.5)
        };
        let run = train(&cfg, &env.build()?)?;
        let last = run.last().expect("records");
        println!("{mix_p:>6} {:>14.3e} {:>14.4}", last.normalized_kl.unwrap_or(f64::NAN), last.kl_to_ref);
    }
    Ok(())
}
