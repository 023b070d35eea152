//! Token-level estimators of the regularizer gradient.
//!
//! For an autoregressive policy the gradient of `KL(pi || pi_ref)` is
//! `g(pi) = E_pi[log(pi/pi_ref)(y) * grad log pi(y)]`, where both factors
//! decompose over tokens. The estimators below differ in which token pairs
//! they keep and in whether future log-ratios are replaced by exact per-step
//! KLs at the sampled prefix. All of them are unbiased on-policy; they differ
//! in variance, which [`variance_harness`] and [`compare_trace_cov`] measure.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, kl_from_logs};
use crate::policy::ArPolicy;
use crate::stats::{Moments, Z_99_ONE_SIDED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TokenEstimator {
    /// Full double sum over token pairs.
    G1,
    /// Upper-triangular pairs only (`t' >= t`).
    G2,
    /// Own log-ratio plus exact per-step KLs of later tokens.
    G3,
    /// Upper-triangular form applied to sequences drawn from a behavior policy.
    GOff,
    /// `(log pi/pi_ref)^2` times the sequence score.
    GSqNaive,
    /// Squared-term estimator with vanishing pairs removed and future
    /// log-ratios replaced by per-step KLs.
    GSqReduced,
}

impl TokenEstimator {
    pub const ALL: [TokenEstimator; 6] = [
        TokenEstimator::G1,
        TokenEstimator::G2,
        TokenEstimator::G3,
        TokenEstimator::GOff,
        TokenEstimator::GSqNaive,
        TokenEstimator::GSqReduced,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TokenEstimator::G1 => "g1",
            TokenEstimator::G2 => "g2",
            TokenEstimator::G3 => "g3",
            TokenEstimator::GOff => "g_off",
            TokenEstimator::GSqNaive => "g_sq_naive",
            TokenEstimator::GSqReduced => "g_sq_reduced",
        }
    }

    /// Whether the estimator targets the squared log-ratio term rather than `g`.
    pub fn is_squared(self) -> bool {
        matches!(self, TokenEstimator::GSqNaive | TokenEstimator::GSqReduced)
    }

    pub fn estimate(self, policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<TokenEstimate> {
        match self {
            TokenEstimator::G1 => g_hat_1(policy, reference, seq),
            TokenEstimator::G2 => g_hat_2(policy, reference, seq),
            TokenEstimator::G3 => g_hat_3(policy, reference, seq),
            TokenEstimator::GOff => g_off(policy, reference, seq),
            TokenEstimator::GSqNaive => g_sq(policy, reference, seq, SqVariant::Naive),
            TokenEstimator::GSqReduced => g_sq(policy, reference, seq, SqVariant::Reduced),
        }
    }
}

impl fmt::Display for TokenEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for TokenEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenEstimator::ALL
            .into_iter()
            .find(|e| e.key() == s)
            .ok_or_else(|| {
                let keys: Vec<_> = TokenEstimator::ALL.iter().map(|e| e.key()).collect();
                Error::config("estimator", format!("unknown token estimator `{s}`; valid: {}", keys.join(", ")))
            })
    }
}

impl TryFrom<String> for TokenEstimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TokenEstimator> for String {
    fn from(e: TokenEstimator) -> Self {
        e.key().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEstimate {
    pub grad: Vec<f64>,
    pub estimator_id: TokenEstimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqVariant {
    Naive,
    Reduced,
}

impl FromStr for SqVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(SqVariant::Naive),
            "reduced" => Ok(SqVariant::Reduced),
            other => Err(Error::invalid(format!("unknown variant `{other}`; valid: naive, reduced"))),
        }
    }
}

/// Per-token log-ratios and exact per-step KLs along one sequence.
struct Trace {
    log_ratio: Vec<f64>,
    step_kl: Vec<f64>,
}

fn trace(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<Trace> {
    policy.check_same_shape(reference)?;
    policy.shape().check_sequence(seq)?;
    let mut log_ratio = Vec::with_capacity(seq.len());
    let mut step_kl = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let lp = policy.log_probs_at(&seq[..t]);
        let lq = reference.log_probs_at(&seq[..t]);
        log_ratio.push(lp[seq[t]] - lq[seq[t]]);
        step_kl.push(kl_from_logs(&lp, &lq));
    }
    Ok(Trace { log_ratio, step_kl })
}

/// `sum_t weight_t * score_t`.
fn weighted_scores(policy: &ArPolicy, seq: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; policy.param_dim()];
    for (t, &w) in weights.iter().enumerate() {
        policy.add_token_score(&seq[..t], seq[t], w, &mut g);
    }
    g
}

/// Suffix sums: `out[t] = sum_{t' >= t} v[t']`.
fn suffix_sums(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len() + 1];
    for t in (0..v.len()).rev() {
        out[t] = out[t + 1] + v[t];
    }
    out
}

pub fn g_hat_1(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<TokenEstimate> {
    let tr = trace(policy, reference, seq)?;
    let total: f64 = tr.log_ratio.iter().sum();
    Ok(TokenEstimate {
        grad: weighted_scores(policy, seq, &vec![total; seq.len()]),
        estimator_id: TokenEstimator::G1,
    })
}

pub fn g_hat_2(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<TokenEstimate> {
    let tr = trace(policy, reference, seq)?;
    let tail = suffix_sums(&tr.log_ratio);
    Ok(TokenEstimate {
        grad: weighted_scores(policy, seq, &tail[..seq.len()]),
        estimator_id: TokenEstimator::G2,
    })
}

pub fn g_hat_3(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<TokenEstimate> {
    let tr = trace(policy, reference, seq)?;
    let kl_tail = suffix_sums(&tr.step_kl);
    let weights: Vec<f64> = (0..seq.len()).map(|t| tr.log_ratio[t] + kl_tail[t + 1]).collect();
    Ok(TokenEstimate {
        grad: weighted_scores(policy, seq, &weights),
        estimator_id: TokenEstimator::G3,
    })
}

/// Same weights as [`g_hat_2`]; `seq` is expected to come from a behavior policy.
pub fn g_off(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<TokenEstimate> {
    let mut est = g_hat_2(policy, reference, seq)?;
    est.estimator_id = TokenEstimator::GOff;
    Ok(est)
}

/// Estimators of `E_pi[(log pi/pi_ref)^2 * grad log pi]`.
///
/// The reduced variant keeps, for the score at position `s`, the square of
/// the log-ratios from `s` on, plus twice the products of earlier log-ratios
/// with the log-ratio at `s` and the exact KLs after `s`. Pairs lying
/// entirely before `s` have zero mean and are dropped.
pub fn g_sq(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize], variant: SqVariant) -> Result<TokenEstimate> {
    let tr = trace(policy, reference, seq)?;
    let t_len = seq.len();
    let (weights, id) = match variant {
        SqVariant::Naive => {
            let total: f64 = tr.log_ratio.iter().sum();
            (vec![total * total; t_len], TokenEstimator::GSqNaive)
        }
        SqVariant::Reduced => {
            let tail = suffix_sums(&tr.log_ratio);
            let kl_tail = suffix_sums(&tr.step_kl);
            let mut head = 0.0;
            let mut w = Vec::with_capacity(t_len);
            for s in 0..t_len {
                w.push(tail[s] * tail[s] + 2.0 * head * (tr.log_ratio[s] + kl_tail[s + 1]));
                head += tr.log_ratio[s];
            }
            (w, TokenEstimator::GSqReduced)
        }
    };
    Ok(TokenEstimate {
        grad: weighted_scores(policy, seq, &weights),
        estimator_id: id,
    })
}

/// Sum over the sampled prefixes of the exact gradient of the per-step KL.
pub fn per_token_kl_grad(policy: &ArPolicy, reference: &ArPolicy, seq: &[usize]) -> Result<Vec<f64>> {
    policy.check_same_shape(reference)?;
    policy.shape().check_sequence(seq)?;
    let v = policy.shape().vocab;
    let mut g = vec![0.0; policy.param_dim()];
    for t in 0..seq.len() {
        let prefix = &seq[..t];
        let row = policy.shape().node(prefix);
        let lp = policy.log_probs_at(prefix);
        let lq = reference.log_probs_at(prefix);
        let kl = kl_from_logs(&lp, &lq);
        for k in 0..v {
            g[row * v + k] += lp[k].exp() * (lp[k] - lq[k] - kl);
        }
    }
    Ok(g)
}

/// `sum_y sampler(y) * f(y)` over every sequence.
fn enumerate<F>(sampler: &ArPolicy, dim: usize, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut acc = vec![0.0; dim];
    let probs = sampler.enumerate_probs();
    for (seq, p) in sampler.shape().sequences().zip(probs) {
        axpy(p, &f(&seq)?, &mut acc);
    }
    Ok(acc)
}

/// Exact `g(pi) = E_pi[log(pi/pi_ref)(y) * grad log pi(y)]`.
pub fn exact_kl_grad(policy: &ArPolicy, reference: &ArPolicy) -> Result<Vec<f64>> {
    policy.check_same_shape(reference)?;
    enumerate(policy, policy.param_dim(), |seq| {
        let lr = policy.seq_logprob(seq)? - reference.seq_logprob(seq)?;
        let mut s = policy.seq_score(seq)?;
        s.iter_mut().for_each(|v| *v *= lr);
        Ok(s)
    })
}

/// Exact `E_pi[(log pi/pi_ref)(y)^2 * grad log pi(y)]`.
pub fn exact_sq_term(policy: &ArPolicy, reference: &ArPolicy) -> Result<Vec<f64>> {
    policy.check_same_shape(reference)?;
    enumerate(policy, policy.param_dim(), |seq| {
        let lr = policy.seq_logprob(seq)? - reference.seq_logprob(seq)?;
        let mut s = policy.seq_score(seq)?;
        s.iter_mut().for_each(|v| *v *= lr * lr);
        Ok(s)
    })
}

/// The quantity an estimator targets: [`exact_sq_term`] for the squared
/// estimators, [`exact_kl_grad`] otherwise.
pub fn exact_target(estimator: TokenEstimator, policy: &ArPolicy, reference: &ArPolicy) -> Result<Vec<f64>> {
    if estimator.is_squared() {
        exact_sq_term(policy, reference)
    } else {
        exact_kl_grad(policy, reference)
    }
}

/// Exact mean of an estimator over sequences drawn from `sampler`.
pub fn exact_expectation(
    estimator: TokenEstimator,
    policy: &ArPolicy,
    reference: &ArPolicy,
    sampler: &ArPolicy,
) -> Result<Vec<f64>> {
    policy.check_same_shape(sampler)?;
    enumerate(sampler, policy.param_dim(), |seq| Ok(estimator.estimate(policy, reference, seq)?.grad))
}

/// Exact `E_pi[score(y_t) * log(pi/pi_ref)(y_{t2})]` for positions `t`, `t2`.
pub fn cross_term_expectation(policy: &ArPolicy, reference: &ArPolicy, t: usize, t2: usize) -> Result<Vec<f64>> {
    policy.check_same_shape(reference)?;
    let horizon = policy.shape().horizon;
    if t >= horizon || t2 >= horizon {
        return Err(Error::invalid(format!("positions must be below the horizon {horizon}")));
    }
    enumerate(policy, policy.param_dim(), |seq| {
        let lr = policy.log_probs_at(&seq[..t2])[seq[t2]] - reference.log_probs_at(&seq[..t2])[seq[t2]];
        let mut g = vec![0.0; policy.param_dim()];
        policy.add_token_score(&seq[..t], seq[t], lr, &mut g);
        Ok(g)
    })
}

/// Monte-Carlo summary of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRecord {
    pub estimator: TokenEstimator,
    pub num_samples: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub trace_cov: f64,
    pub std_errors: Vec<f64>,
}

/// Draws `num_samples` sequences from `sampler` (the policy itself when
/// `None`) and accumulates the estimator's moments.
pub fn variance_harness(
    estimator: TokenEstimator,
    policy: &ArPolicy,
    reference: &ArPolicy,
    sampler: Option<&ArPolicy>,
    num_samples: usize,
    seed: u64,
) -> Result<HarnessRecord> {
    if num_samples < 2 {
        return Err(Error::invalid("the harness needs at least two samples"));
    }
    let sampler = sampler.unwrap_or(policy);
    policy.check_same_shape(sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moments = Moments::new(policy.param_dim());
    for _ in 0..num_samples {
        let seq = sampler.sample_seq(&mut rng);
        moments.push(&estimator.estimate(policy, reference, &seq)?.grad);
    }
    Ok(HarnessRecord {
        estimator,
        num_samples,
        seed,
        mean: moments.mean().to_vec(),
        trace_cov: moments.trace_cov(),
        std_errors: moments.std_errors(),
    })
}

/// Paired test that `lower` has smaller trace-covariance than `higher`,
/// both evaluated on the same on-policy sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub lower: TokenEstimator,
    pub higher: TokenEstimator,
    pub trace_lower: f64,
    pub trace_higher: f64,
    /// Standardized `trace_higher - trace_lower`.
    pub z: f64,
    /// `z` exceeds the one-sided 99% normal quantile.
    pub significant_99: bool,
}

pub fn compare_trace_cov(
    lower: TokenEstimator,
    higher: TokenEstimator,
    policy: &ArPolicy,
    reference: &ArPolicy,
    num_samples: usize,
    seed: u64,
) -> Result<VarianceComparison> {
    if num_samples < 2 {
        return Err(Error::invalid("the comparison needs at least two samples"));
    }
    let dim = policy.param_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (Moments::new(dim), Moments::new(dim));
    // Per-sample difference of squared norms; its mean minus the difference
    // of squared means estimates trace_higher - trace_lower.
    let mut sq_diff = Moments::new(1);
    for _ in 0..num_samples {
        let seq = policy.sample_seq(&mut rng);
        let a = lower.estimate(policy, reference, &seq)?.grad;
        let b = higher.estimate(policy, reference, &seq)?.grad;
        let na: f64 = a.iter().map(|v| v * v).sum();
        let nb: f64 = b.iter().map(|v| v * v).sum();
        sq_diff.push(&[nb - na]);
        lo.push(&a);
        hi.push(&b);
    }
    let (trace_lower, trace_higher) = (lo.trace_cov(), hi.trace_cov());
    let se = sq_diff.std_errors()[0];
    let diff = trace_higher - trace_lower;
    let z = if se > 0.0 { diff / se } else if diff > 0.0 { f64::INFINITY } else { 0.0 };
    Ok(VarianceComparison {
        lower,
        higher,
        trace_lower,
        trace_higher,
        z,
        significant_99: z > Z_99_ONE_SIDED,
    })
}

/// One CSV row per (estimator, policy fixture, sample count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub estimator: String,
    pub fixture: String,
    pub num_samples: usize,
    pub seed: u64,
    pub trace_cov: f64,
    pub max_std_error: f64,
}

impl HarnessRow {
    pub fn new(fixture: &str, record: &HarnessRecord) -> Self {
        Self {
            estimator: record.estimator.key().to_string(),
            fixture: fixture.to_string(),
            num_samples: record.num_samples,
            seed: record.seed,
            trace_cov: record.trace_cov,
            max_std_error: record.std_errors.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub fn write_harness_csv<W: Write>(out: W, rows: &[HarnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
