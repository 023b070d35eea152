//! Each estimator against the exact gradient it targets: exact expectation by
//! enumerating every response tuple, then a Monte-Carlo mean with standard
//! errors.
//!
//! `cargo run --release -p agro --example estimator_unbiasedness`

use agro::env::random_env;
use agro::grad::{Behavior, Estimator, SampleBatch};
use agro::math::max_abs_diff;
use agro::oracle;
use agro::policy::SoftmaxPolicy;
use agro::stats::Moments;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCHES: usize = 200_000;

fn main() -> agro::Result<()> {
    let env = random_env(3, 2, 3, 1.0)?;
    let beta = 0.5;
    let n = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pi = SoftmaxPolicy::random(2, 3, 0.7, &mut rng)?;
    let mu = SoftmaxPolicy::from_ref(&env);

    println!("{:<22} {:>14} {:>16}", "estimator", "|E - exact|", "max |z| (MC)");
    for est in Estimator::ALL {
        let Some(target) = oracle::estimator_target(est, &pi, &env, beta, &mu)? else {
            let biased = oracle::estimator_expectation(est, &pi, &env, beta, None, n)?;
            let lr = oracle::exact_grad(oracle::GradKind::LOnLr, &pi, &env, beta, None)?;
            println!("{:<22} {:>14.3e} {:>16}", est.key(), max_abs_diff(&biased.grad, &lr.grad), "(biased)");
            continue;
        };
        let exact = oracle::estimator_expectation(est, &pi, &env, beta, target.behavior, n)?;
        let (sampler, behavior) = match target.behavior {
            Some(m) => (m, Behavior::BehaviorMu),
            None => (&pi, Behavior::OnPolicy),
        };
        let mut moments = Moments::new(pi.param_dim());
        for _ in 0..BATCHES {
            let x = env.sample_prompt(&mut rng);
            let batch = SampleBatch::draw(&env, sampler, x, n, behavior, &mut rng);
            moments.push(&est.estimate(&pi, &env, beta, &batch)?.grad);
        }
        let worst_z = moments
            .mean()
            .iter()
            .zip(&target.grad)
            .zip(moments.std_errors())
            .map(|((m, t), se)| if se > 0.0 { (m - t).abs() / se } else { 0.0 })
            .fold(0.0, f64::max);
        println!("{:<22} {:>14.3e} {:>16.2}", est.key(), max_abs_diff(&exact.grad, &target.grad), worst_z);
    }
    Ok(())
}
