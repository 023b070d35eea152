//! Plain SGD over tabular softmax policies.
//!
//! A run starts at `pi_ref`, draws batches according to the sampling mode,
//! follows the chosen estimator (downhill for AGRO losses, uphill for the
//! policy-gradient estimators) and logs exact oracle metrics.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{canonical_env, random_env, TabularEnv};
use crate::error::{Error, Result};
use crate::grad::{Behavior, Direction, Estimator, SampleBatch, ValueHead};
use crate::math::{axpy, norm};
use crate::oracle::{self, GradKind};
use crate::policy::SoftmaxPolicy;

/// Default halt threshold on `E_rho KL(pi, pi_ref)`.
pub const DIVERGENCE_KL: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    #[default]
    Canonical,
    Random {
        seed: u64,
        num_prompts: usize,
        num_responses: usize,
        #[serde(default = "default_reward_scale")]
        reward_scale: f64,
    },
    Inline(TabularEnv),
}

fn default_reward_scale() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularEnv> {
        match self {
            EnvSpec::Canonical => Ok(canonical_env()),
            EnvSpec::Random {
                seed,
                num_prompts,
                num_responses,
                reward_scale,
            } => random_env(*seed, *num_prompts, *num_responses, *reward_scale),
            EnvSpec::Inline(env) => {
                env.validate()?;
                Ok(env.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Fresh responses from the current policy.
    #[default]
    OnPolicy,
    /// Fresh responses from the fixed reference policy.
    BehaviorRef,
    /// Fresh on-policy batches, randomly replaced by replayed ones.
    BufferMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub env: EnvSpec,
    pub beta: f64,
    pub estimator: Estimator,
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::batch_prompts")]
    pub batch_prompts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub sampling_mode: SamplingMode,
    #[serde(default = "defaults::mix_p")]
    pub mix_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Divide every gradient by `beta^2`.
    #[serde(default)]
    pub grad_rescale_beta2: bool,
    #[serde(default = "defaults::buffer_capacity")]
    pub buffer_capacity: usize,
    /// Replace the stochastic estimate by its exact expectation.
    #[serde(default)]
    pub exact_gradients: bool,
    /// Halt threshold on `E_rho KL(pi, pi_ref)`.
    #[serde(default = "defaults::divergence_kl")]
    pub divergence_kl: f64,
}

mod defaults {
    pub fn n() -> usize {
        4
    }
    pub fn batch_prompts() -> usize {
        8
    }
    pub fn mix_p() -> f64 {
        0.5
    }
    pub fn eval_every() -> usize {
        1
    }
    pub fn buffer_capacity() -> usize {
        1024
    }
    pub fn divergence_kl() -> f64 {
        super::DIVERGENCE_KL
    }
}

impl RunConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(estimator: Estimator, beta: f64, steps: usize, learning_rate: f64) -> Self {
        Self {
            env: EnvSpec::Canonical,
            beta,
            estimator,
            n: defaults::n(),
            batch_prompts: defaults::batch_prompts(),
            steps,
            learning_rate,
            sampling_mode: SamplingMode::OnPolicy,
            mix_p: defaults::mix_p(),
            seed: 0,
            eval_every: defaults::eval_every(),
            grad_rescale_beta2: false,
            buffer_capacity: defaults::buffer_capacity(),
            exact_gradients: false,
            divergence_kl: DIVERGENCE_KL,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if self.estimator.requires_positive_beta() && self.beta <= 0.0 {
            return Err(Error::config(
                "beta",
                format!("estimator {} requires beta > 0", self.estimator),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_p) {
            return Err(Error::config("mix_p", format!("must lie in [0, 1], got {}", self.mix_p)));
        }
        if self.n < 2 {
            return Err(Error::config("n", "leave-one-out estimators need n >= 2"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_prompts == 0 {
            return Err(Error::config("batch_prompts", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if self.estimator.on_policy_only() && self.sampling_mode != SamplingMode::OnPolicy {
            return Err(Error::config(
                "sampling_mode",
                format!("estimator {} needs on_policy sampling", self.estimator),
            ));
        }
        if self.exact_gradients && self.sampling_mode == SamplingMode::BufferMix {
            return Err(Error::config("exact_gradients", "has no exact counterpart for buffer_mix"));
        }
        if self.divergence_kl.is_nan() || self.divergence_kl <= 0.0 {
            return Err(Error::config("divergence_kl", "must be > 0"));
        }
        if self.grad_rescale_beta2 && self.beta <= 0.0 {
            return Err(Error::config("grad_rescale_beta2", "requires beta > 0"));
        }
        Ok(())
    }
}

/// Per-step telemetry. KL-to-optimum fields are absent when `beta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub kl_to_star: Option<f64>,
    pub normalized_kl: Option<f64>,
    pub kl_to_ref: f64,
    #[serde(rename = "objective_G")]
    pub objective_g: f64,
    /// On-policy loss at the current policy.
    #[serde(rename = "loss_L")]
    pub loss_l: f64,
    pub mean_train_reward: f64,
    pub grad_norm: f64,
}

/// Oracle metrics of `policy`, with the training-side fields filled in by the caller.
pub fn evaluate(
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    beta: f64,
    step: usize,
    mean_train_reward: f64,
    grad_norm: f64,
) -> Result<MetricsRecord> {
    let (kl_to_star, normalized_kl, kl_to_ref) = if beta > 0.0 {
        let m = oracle::kl_metrics(policy, env, beta)?;
        (Some(m.kl_to_star), Some(m.normalized_kl), m.kl_to_ref)
    } else {
        let reference = SoftmaxPolicy::from_ref(env);
        let kl = (0..env.num_prompts())
            .map(|x| {
                env.prompt_weights()[x] * crate::math::kl_from_logs(&policy.log_probs(x), &reference.log_probs(x))
            })
            .sum();
        (None, None, kl)
    };
    Ok(MetricsRecord {
        step,
        kl_to_star,
        normalized_kl,
        kl_to_ref,
        objective_g: oracle::objective_g(policy, env, beta)?,
        loss_l: oracle::loss_l(policy, env, beta, None)?,
        mean_train_reward,
        grad_norm,
    })
}

/// FIFO store of past batches.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<SampleBatch>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, batch: SampleBatch) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(batch);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &SampleBatch> {
        self.items.iter()
    }

    /// A uniformly chosen stored batch, or `None` when empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&SampleBatch> {
        if self.items.is_empty() {
            None
        } else {
            self.items.get(rng.random_range(0..self.items.len()))
        }
    }
}

/// With probability `mix_p` replays a stored batch; otherwise draws a fresh
/// on-policy batch and stores it. An empty buffer always yields a fresh batch.
pub fn buffer_mix_sampler<R: Rng + ?Sized>(
    buffer: &mut ReplayBuffer,
    policy: &SoftmaxPolicy,
    env: &TabularEnv,
    n: usize,
    mix_p: f64,
    rng: &mut R,
) -> SampleBatch {
    let replay = rng.random::<f64>() < mix_p;
    if replay {
        if let Some(b) = buffer.sample(rng) {
            let mut b = b.clone();
            b.behavior = Behavior::Buffer;
            return b;
        }
    }
    let x = env.sample_prompt(rng);
    let batch = SampleBatch::draw(env, policy, x, n, Behavior::OnPolicy, rng);
    buffer.push(batch.clone());
    batch
}

/// Result of a run: logged records, whether the divergence guard fired, and
/// the final policy.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub diverged: bool,
    pub policy: SoftmaxPolicy,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Exact expected update direction for the configured estimator and sampler.
fn exact_direction(cfg: &RunConfig, policy: &SoftmaxPolicy, env: &TabularEnv, reference: &SoftmaxPolicy) -> Result<Vec<f64>> {
    let mu = match cfg.sampling_mode {
        SamplingMode::BehaviorRef => Some(reference),
        _ => None,
    };
    let beta = cfg.beta;
    Ok(match cfg.estimator {
        Estimator::OffPolicyAgro | Estimator::Pd => oracle::exact_grad(GradKind::LOff, policy, env, beta, mu)?.grad,
        Estimator::Lr => oracle::exact_grad(GradKind::LOnLr, policy, env, beta, None)?.grad,
        Estimator::OnPolicyAgro => oracle::exact_grad(GradKind::LOn, policy, env, beta, None)?.grad,
        Estimator::Rloo => oracle::exact_grad(GradKind::G, policy, env, beta, None)?.grad,
        Estimator::KlPg => {
            let unweighted = oracle::expected_klpg_direction(policy, env, beta, mu.unwrap_or(policy))?;
            let k = env.num_responses();
            unweighted
                .iter()
                .enumerate()
                .map(|(i, g)| env.prompt_weights()[i / k] * g)
                .collect()
        }
        Estimator::LrBiased => oracle::estimator_expectation(cfg.estimator, policy, env, beta, mu, cfg.n)?.grad,
    })
}

fn expected_reward(policy: &SoftmaxPolicy, env: &TabularEnv) -> f64 {
    env.prompt_weights()
        .iter()
        .enumerate()
        .map(|(x, w)| {
            let p = policy.probs(x);
            w * p.iter().zip(env.reward_row(x)).map(|(a, r)| a * r).sum::<f64>()
        })
        .sum()
}

/// Runs SGD from `pi_ref`. Deterministic given the config.
pub fn train(cfg: &RunConfig, env: &TabularEnv) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference = SoftmaxPolicy::from_ref(env);
    let mut policy = reference.clone();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let sign = match cfg.estimator.direction() {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    let scale = if cfg.grad_rescale_beta2 { 1.0 / (cfg.beta * cfg.beta) } else { 1.0 };
    let mut records = Vec::new();
    let mut diverged = false;

    for step in 1..=cfg.steps {
        let (mut grad, mean_reward) = if cfg.exact_gradients {
            let sampler = if cfg.sampling_mode == SamplingMode::BehaviorRef { &reference } else { &policy };
            (exact_direction(cfg, &policy, env, &reference)?, expected_reward(sampler, env))
        } else {
            let mut grad = vec![0.0; policy.param_dim()];
            let mut reward_sum = 0.0;
            let weight = 1.0 / cfg.batch_prompts as f64;
            for _ in 0..cfg.batch_prompts {
                let batch = match cfg.sampling_mode {
                    SamplingMode::OnPolicy => {
                        let x = env.sample_prompt(&mut rng);
                        SampleBatch::draw(env, &policy, x, cfg.n, Behavior::OnPolicy, &mut rng)
                    }
                    SamplingMode::BehaviorRef => {
                        let x = env.sample_prompt(&mut rng);
                        SampleBatch::draw(env, &reference, x, cfg.n, Behavior::BehaviorMu, &mut rng)
                    }
                    SamplingMode::BufferMix => {
                        buffer_mix_sampler(&mut buffer, &policy, env, cfg.n, cfg.mix_p, &mut rng)
                    }
                };
                reward_sum += batch.rewards.iter().sum::<f64>() / batch.n() as f64;
                let est = cfg.estimator.estimate(&policy, env, cfg.beta, &batch)?;
                axpy(weight, &est.grad, &mut grad);
            }
            (grad, reward_sum * weight)
        };
        grad.iter_mut().for_each(|g| *g *= scale);
        let grad_norm = norm(&grad);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step });
        }
        axpy(sign * cfg.learning_rate, &grad, policy.logits_mut());

        let kl_to_ref: f64 = (0..env.num_prompts())
            .map(|x| {
                env.prompt_weights()[x] * crate::math::kl_from_logs(&policy.log_probs(x), env.ref_log_prob_row(x))
            })
            .sum();
        let halt = !kl_to_ref.is_finite() || kl_to_ref > cfg.divergence_kl;
        if step % cfg.eval_every == 0 || step == cfg.steps || halt {
            records.push(evaluate(&policy, env, cfg.beta, step, mean_reward, grad_norm)?);
        }
        if halt {
            diverged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        diverged,
        policy,
    })
}

/// One run of a sweep; failed runs keep their error message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub beta: f64,
    pub records: Vec<MetricsRecord>,
    pub diverged: bool,
    pub error: Option<String>,
}

impl SweepEntry {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// One full run per `beta`, all sharing the config's seed.
pub fn beta_sweep(cfg: &RunConfig, betas: &[f64]) -> Result<Vec<SweepEntry>> {
    let env = cfg.env.build()?;
    Ok(betas
        .iter()
        .map(|&beta| {
            let run = RunConfig { beta, ..cfg.clone() };
            match train(&run, &env) {
                Ok(out) => SweepEntry {
                    beta,
                    records: out.records,
                    diverged: out.diverged,
                    error: None,
                },
                Err(e) => SweepEntry {
                    beta,
                    records: Vec::new(),
                    diverged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Result of [`exact_value_descent`].
#[derive(Debug, Clone)]
pub struct ValueDescent {
    pub policy: SoftmaxPolicy,
    pub value: ValueHead,
    pub steps: usize,
    pub loss: f64,
}

/// Full-batch joint descent on the single-sample consistency loss
/// `E_rho E_mu (r - V(x) - beta log pi/pi_ref)^2`, from `(pi_ref, 0)`.
/// Stops once the joint gradient norm drops below `tol`.
pub fn exact_value_descent(
    env: &TabularEnv,
    beta: f64,
    mu: &SoftmaxPolicy,
    learning_rate: f64,
    max_steps: usize,
    tol: f64,
) -> Result<ValueDescent> {
    let mut policy = SoftmaxPolicy::from_ref(env);
    let mut value = ValueHead::zeros(env.num_prompts());
    let mut steps = 0;
    while steps < max_steps {
        let (g, gv) = oracle::exact_value_grad(&policy, &value, env, beta, mu)?;
        let size = (norm(&g).powi(2) + norm(&gv).powi(2)).sqrt();
        if !size.is_finite() {
            return Err(Error::NonFinite { step: steps });
        }
        if size < tol {
            break;
        }
        axpy(-learning_rate, &g, policy.logits_mut());
        axpy(-learning_rate, &gv, &mut value.v);
        steps += 1;
    }
    let loss = oracle::value_loss(&policy, &value, env, beta, mu)?;
    Ok(ValueDescent {
        policy,
        value,
        steps,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off_policy_cfg(estimator: Estimator) -> RunConfig {
        RunConfig {
            sampling_mode: SamplingMode::BehaviorRef,
            ..RunConfig::new(estimator, 1.0, 200, 0.1)
        }
    }

    #[test]
    fn config_round_trips_and_defaults() {
        let cfg = RunConfig::from_json(r#"{"beta": 1.0, "estimator": "rloo", "steps": 3, "learning_rate": 0.1}"#).unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.mix_p, 0.5);
        assert_eq!(cfg.buffer_capacity, 1024);
        assert_eq!(cfg.env, EnvSpec::Canonical);
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = off_policy_cfg(Estimator::OffPolicyAgro);
        cfg.mix_p = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "mix_p"));
        let cfg = RunConfig::new(Estimator::OffPolicyAgro, 0.0, 1, 0.1);
        match cfg.validate() {
            Err(Error::Config { field, reason }) => {
                assert_eq!(field, "beta");
                assert!(reason.contains("beta > 0"));
            }
            other => panic!("{other:?}"),
        }
        let cfg = off_policy_cfg(Estimator::Pd);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "sampling_mode"));
        assert!(RunConfig::from_json(r#"{"beta": 1.0, "estimator": "ppo", "steps": 3, "learning_rate": 0.1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"beta": 1.0, "estimator": "rloo", "steps": 3, "learning_rate": 0.1, "typo": 1}"#).is_err());
    }

    #[test]
    fn zero_beta_allowed_for_policy_gradient() {
        let cfg = RunConfig::new(Estimator::Rloo, 0.0, 5, 0.1);
        let out = train(&cfg, &canonical_env()).unwrap();
        assert!(out.records.iter().all(|r| r.kl_to_star.is_none()));
    }

    #[test]
    fn env_spec_json_forms() {
        let c: EnvSpec = serde_json::from_str(r#"{"kind": "canonical"}"#).unwrap();
        assert_eq!(c.build().unwrap(), canonical_env());
        let r: EnvSpec = serde_json::from_str(r#"{"kind": "random", "seed": 7, "num_prompts": 3, "num_responses": 4}"#).unwrap();
        assert_eq!(r.build().unwrap(), random_env(7, 3, 4, 1.0).unwrap());
        let i: EnvSpec = serde_json::from_str(
            r#"{"kind": "inline", "rewards": [[1, 0]], "ref_probs": [[0.5, 0.5]], "prompt_weights": [1]}"#,
        )
        .unwrap();
        assert_eq!(i.build().unwrap(), canonical_env());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = RunConfig {
            sampling_mode: SamplingMode::BufferMix,
            ..RunConfig::new(Estimator::OffPolicyAgro, 0.5, 50, 0.2)
        };
        let env = random_env(2, 2, 3, 1.0).unwrap();
        let a = train(&cfg, &env).unwrap();
        let b = train(&cfg, &env).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn zero_learning_rate_keeps_reference_metrics() {
        let cfg = RunConfig::new(Estimator::OnPolicyAgro, 1.0, 20, 0.0);
        let out = train(&cfg, &canonical_env()).unwrap();
        for r in &out.records {
            assert_eq!(r.kl_to_ref, 0.0);
            assert_eq!(r.normalized_kl, Some(1.0));
            assert_eq!(r.objective_g, 0.5);
            assert_eq!(r.loss_l, 0.125);
        }
    }

    #[test]
    fn eval_every_thins_the_stream() {
        let cfg = RunConfig {
            eval_every: 7,
            ..RunConfig::new(Estimator::Rloo, 1.0, 20, 0.1)
        };
        let steps: Vec<usize> = train(&cfg, &canonical_env()).unwrap().records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![7, 14, 20]);
    }

    #[test]
    fn replay_buffer_is_fifo_and_bounded() {
        let env = canonical_env();
        let mut buf = ReplayBuffer::new(2);
        for y in [0, 1, 0] {
            buf.push(SampleBatch::new(&env, 0, vec![y, y], Behavior::OnPolicy).unwrap());
        }
        assert_eq!(buf.len(), 2);
        let first: Vec<usize> = buf.iter().map(|b| b.responses[0]).collect();
        assert_eq!(first, vec![1, 0]);
    }

    #[test]
    fn mix_zero_never_replays() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let mut buf = ReplayBuffer::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = buffer_mix_sampler(&mut buf, &p, &env, 2, 0.0, &mut rng);
            assert_eq!(b.behavior, Behavior::OnPolicy);
        }
        assert_eq!(buf.len(), 16);
    }

    #[test]
    fn mix_one_only_replays_when_seeded() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let mut buf = ReplayBuffer::new(4);
        buf.push(SampleBatch::new(&env, 0, vec![1, 1], Behavior::OnPolicy).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = buffer_mix_sampler(&mut buf, &p, &env, 2, 1.0, &mut rng);
            assert_eq!(b.behavior, Behavior::Buffer);
            assert_eq!(b.responses, vec![1, 1]);
        }
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn mix_half_replay_fraction() {
        let env = canonical_env();
        let p = SoftmaxPolicy::from_ref(&env);
        let mut buf = ReplayBuffer::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        buffer_mix_sampler(&mut buf, &p, &env, 2, 0.0, &mut rng);
        let draws = 10_000;
        let replayed = (0..draws)
            .filter(|_| buffer_mix_sampler(&mut buf, &p, &env, 2, 0.5, &mut rng).behavior == Behavior::Buffer)
            .count();
        let frac = replayed as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn off_policy_agro_converges_and_klpg_does_not() {
        let env = canonical_env();
        let agro = train(&RunConfig { steps: 5000, ..off_policy_cfg(Estimator::OffPolicyAgro) }, &env).unwrap();
        let klpg = train(&RunConfig { steps: 5000, ..off_policy_cfg(Estimator::KlPg) }, &env).unwrap();
        let a = agro.last().unwrap().kl_to_star.unwrap();
        let k = klpg.last().unwrap().kl_to_star.unwrap();
        assert!(a < 1e-4, "{a}");
        assert!(k > 10.0 * a);
    }

    #[test]
    fn exact_descent_is_monotone_on_loss() {
        for seed in 0..3 {
            let env = random_env(seed, 3, 4, 1.0).unwrap();
            let cfg = RunConfig {
                exact_gradients: true,
                ..RunConfig::new(Estimator::OnPolicyAgro, 0.5, 200, 0.05)
            };
            let out = train(&cfg, &env).unwrap();
            let start = oracle::loss_l(&SoftmaxPolicy::from_ref(&env), &env, 0.5, None).unwrap();
            let mut prev = start;
            for r in &out.records {
                assert!(r.loss_l <= prev + 1e-15, "seed {seed} step {}", r.step);
                prev = r.loss_l;
            }
        }
    }

    #[test]
    fn beta_kl_identity_along_trajectory() {
        let env = random_env(9, 2, 3, 1.0).unwrap();
        let cfg = RunConfig::new(Estimator::OnPolicyAgro, 0.3, 100, 0.5);
        let out = train(&cfg, &env).unwrap();
        let g_star: f64 = oracle::optimal_policy(&env, 0.3)
            .unwrap()
            .tilde_v
            .iter()
            .zip(env.prompt_weights())
            .map(|(v, w)| v * w)
            .sum();
        for r in &out.records {
            assert!((0.3 * r.kl_to_star.unwrap() - (g_star - r.objective_g)).abs() < 1e-8);
        }
    }

    #[test]
    fn divergence_guard_halts() {
        // Unregularized policy gradient heads for the argmax, whose KL to the
        // reference is log 2 here; a lowered threshold trips the guard.
        let cfg = RunConfig {
            exact_gradients: true,
            divergence_kl: 0.5,
            ..RunConfig::new(Estimator::Rloo, 0.0, 10_000, 1.0)
        };
        let out = train(&cfg, &canonical_env()).unwrap();
        assert!(out.diverged);
        assert!(out.last().unwrap().kl_to_ref > 0.5);
        assert!(out.last().unwrap().step < 10_000);
        let calm = train(&RunConfig { divergence_kl: DIVERGENCE_KL, ..cfg }, &canonical_env()).unwrap();
        assert!(!calm.diverged);
    }

    #[test]
    fn sweep_records_errors_and_continues() {
        let cfg = RunConfig::new(Estimator::OffPolicyAgro, 1.0, 10, 0.1);
        let rows = beta_sweep(&cfg, &[0.0, 0.5]).unwrap();
        assert!(rows[0].error.is_some());
        assert!(rows[1].error.is_none() && rows[1].last().is_some());
    }

    #[test]
    fn single_beta_sweep_equals_train() {
        let cfg = RunConfig::new(Estimator::Rloo, 0.5, 30, 0.1);
        let rows = beta_sweep(&cfg, &[0.5]).unwrap();
        let direct = train(&cfg, &canonical_env()).unwrap();
        assert_eq!(rows[0].records, direct.records);
    }

    #[test]
    fn value_descent_finds_optimum_and_partition() {
        let env = canonical_env();
        let mu = SoftmaxPolicy::from_ref(&env);
        let out = exact_value_descent(&env, 1.0, &mu, 0.5, 100_000, 1e-12).unwrap();
        let opt = oracle::optimal_policy(&env, 1.0).unwrap();
        let m = oracle::kl_metrics(&out.policy, &env, 1.0).unwrap();
        assert!(m.kl_to_star < 1e-6, "{}", m.kl_to_star);
        assert!((out.value.v[0] - opt.tilde_v[0]).abs() < 1e-6);
        assert!(out.steps < 100_000);
    }
}
