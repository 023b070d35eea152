//! Exact on-policy flows from `pi_ref`: the full loss gradient, its pathwise
//! part alone, and ascent on the regularized objective. The pathwise part is
//! `-beta` times the objective gradient, so with step sizes matched by `beta`
//! its column coincides with ascent on G; the full loss takes another path.
//!
//! `cargo run --release -p agro --example on_policy_dynamics`

use agro::env::random_env;
use agro::math::axpy;
use agro::oracle::{self, GradKind};
use agro::policy::SoftmaxPolicy;

fn main() -> agro::Result<()> {
    let env = random_env(6, 2, 4, 1.0)?;
    let beta = 0.5;
    let flows = [
        ("L full", GradKind::LOn, -1.0, 2.0),
        ("L pathwise", GradKind::LOnPd, -1.0, 2.0),
        ("G ascent", GradKind::G, 1.0, 1.0),
    ];
    let mut policies: Vec<SoftmaxPolicy> = flows.iter().map(|_| SoftmaxPolicy::from_ref(&env)).collect();
    println!("{:>6} {:>14} {:>14} {:>14}", "step", flows[0].0, flows[1].0, flows[2].0);
    for step in 0..=2000 {
        if step % 250 == 0 {
            let kls: Vec<f64> = policies
                .iter()
                .map(|p| oracle::kl_metrics(p, &env, beta).map(|m| m.kl_to_star))
                .collect::<agro::Result<_>>()?;
            println!("{step:>6} {:>14.3e} {:>14.3e} {:>14.3e}", kls[0], kls[1], kls[2]);
        }
        for (p, &(_, kind, sign, lr)) in policies.iter_mut().zip(&flows) {
            let g = oracle::exact_grad(kind, p, &env, beta, None)?.grad;
            axpy(sign * lr, &g, p.logits_mut());
        }
    }
    let gap = agro::math::max_abs_diff(policies[0].logits(), policies[1].logits());
    println!("final logit gap between full and pathwise flows: {gap:.2e}");
    Ok(())
}
