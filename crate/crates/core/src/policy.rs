//! Tabular softmax policies parameterized by raw logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, SeqShape, TabularEnv, TokenEnv};
use crate::error::{Error, Result};
use crate::math::{kl_from_logs, log_softmax, norm};

/// `pi(y|x) = softmax(theta[x])[y]`, one logit row per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SoftmaxDoc", into = "SoftmaxDoc")]
pub struct SoftmaxPolicy {
    num_prompts: usize,
    num_responses: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(num_prompts: usize, num_responses: usize, logits: Vec<f64>) -> Result<Self> {
        if num_prompts == 0 || num_responses == 0 {
            return Err(Error::invalid("policy sizes must be positive"));
        }
        if logits.len() != num_prompts * num_responses {
            return Err(Error::Shape(format!(
                "{} logits for a {num_prompts}x{num_responses} policy",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self {
            num_prompts,
            num_responses,
            logits,
        })
    }

    pub fn uniform(num_prompts: usize, num_responses: usize) -> Self {
        Self::new(num_prompts, num_responses, vec![0.0; num_prompts * num_responses])
            .expect("positive sizes")
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(num_prompts: usize, num_responses: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let logits = (0..num_prompts * num_responses)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self::new(num_prompts, num_responses, logits)
    }

    /// Policy equal to `pi_ref`: logits are copied from `log pi_ref`.
    pub fn from_ref(env: &TabularEnv) -> Self {
        let logits = (0..env.num_prompts())
            .flat_map(|x| env.ref_log_prob_row(x).to_vec())
            .collect();
        Self::new(env.num_prompts(), env.num_responses(), logits).expect("env is valid")
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn param_dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable parameter access for optimizers. Callers keep entries finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.logits[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(self.row(x))
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        self.log_probs(x).into_iter().map(f64::exp).collect()
    }

    pub fn check_matches(&self, env: &TabularEnv) -> Result<()> {
        if self.num_prompts != env.num_prompts() || self.num_responses != env.num_responses() {
            return Err(Error::Shape(format!(
                "policy is {}x{} but environment is {}x{}",
                self.num_prompts,
                self.num_responses,
                env.num_prompts(),
                env.num_responses()
            )));
        }
        Ok(())
    }

    fn check_index(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.num_prompts || y >= self.num_responses {
            return Err(Error::invalid(format!(
                "index ({x}, {y}) outside {}x{}",
                self.num_prompts, self.num_responses
            )));
        }
        Ok(())
    }

    pub fn logprob(&self, x: usize, y: usize) -> Result<f64> {
        self.check_index(x, y)?;
        Ok(self.log_probs(x)[y])
    }

    /// Score `d log pi(y|x) / d theta`: `1{y'=y} - pi(y'|x)` on row `x`, zero elsewhere.
    pub fn score(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        self.check_index(x, y)?;
        let mut g = vec![0.0; self.param_dim()];
        add_score(&self.probs(x), x, y, 1.0, &mut g);
        Ok(g)
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs(x), rng)
    }

    pub fn enumerate_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.check_index(x, 0)?;
        Ok(self.probs(x))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Adds `weight * score(x, y)` into a flat gradient, given the row's probabilities.
pub(crate) fn add_score(probs: &[f64], x: usize, y: usize, weight: f64, grad: &mut [f64]) {
    let k = probs.len();
    let row = &mut grad[x * k..(x + 1) * k];
    for (g, p) in row.iter_mut().zip(probs) {
        *g -= weight * p;
    }
    row[y] += weight;
}

#[derive(Serialize, Deserialize)]
struct SoftmaxDoc {
    num_prompts: usize,
    num_responses: usize,
    logits: Vec<Vec<f64>>,
}

impl TryFrom<SoftmaxDoc> for SoftmaxPolicy {
    type Error = Error;

    fn try_from(doc: SoftmaxDoc) -> Result<Self> {
        if doc.logits.len() != doc.num_prompts
            || doc.logits.iter().any(|r| r.len() != doc.num_responses)
        {
            return Err(Error::Shape("logit table does not match header".into()));
        }
        SoftmaxPolicy::new(doc.num_prompts, doc.num_responses, doc.logits.concat())
    }
}

impl From<SoftmaxPolicy> for SoftmaxDoc {
    fn from(p: SoftmaxPolicy) -> Self {
        SoftmaxDoc {
            num_prompts: p.num_prompts,
            num_responses: p.num_responses,
            logits: p.logits.chunks(p.num_responses).map(<[f64]>::to_vec).collect(),
        }
    }
}

/// Autoregressive policy with one logit row per prefix of length `< T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArPolicy {
    shape: SeqShape,
    logits: Vec<f64>,
}

impl ArPolicy {
    pub fn from_logits(shape: SeqShape, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != shape.param_dim() {
            return Err(Error::Shape(format!(
                "{} logits for {} parameters",
                logits.len(),
                shape.param_dim()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self { shape, logits })
    }

    pub fn uniform(shape: SeqShape) -> Self {
        Self::from_logits(shape, vec![0.0; shape.param_dim()]).expect("zeros are finite")
    }

    /// Reference logits with `shift` added to `token` at every prefix.
    pub fn shifted(reference: &ArPolicy, token: usize, shift: f64) -> Self {
        let v = reference.shape.vocab;
        let mut logits = reference.logits.clone();
        for row in logits.chunks_mut(v) {
            row[token] += shift;
        }
        Self::from_logits(reference.shape, logits).expect("finite shift")
    }

    /// The fixture used for variance comparisons: `pi_ref` with +0.5 on token 1.
    pub fn standard_perturbed(env: &TokenEnv) -> Self {
        Self::shifted(&env.ref_policy(), 1, 0.5)
    }

    pub fn shape(&self) -> SeqShape {
        self.shape
    }

    pub fn param_dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row_log_probs(&self, row: usize) -> Vec<f64> {
        let v = self.shape.vocab;
        log_softmax(&self.logits[row * v..(row + 1) * v])
    }

    /// Conditional log-probabilities `log pi(. | prefix)`.
    pub fn log_probs_at(&self, prefix: &[usize]) -> Vec<f64> {
        self.row_log_probs(self.shape.node(prefix))
    }

    pub fn probs_at(&self, prefix: &[usize]) -> Vec<f64> {
        self.log_probs_at(prefix).into_iter().map(f64::exp).collect()
    }

    /// Chain-rule sequence log-probability.
    pub fn seq_logprob(&self, seq: &[usize]) -> Result<f64> {
        self.shape.check_sequence(seq)?;
        Ok((0..seq.len())
            .map(|t| self.log_probs_at(&seq[..t])[seq[t]])
            .sum())
    }

    /// Adds `weight * d log pi(token | prefix) / d theta` into `grad`.
    pub(crate) fn add_token_score(&self, prefix: &[usize], token: usize, weight: f64, grad: &mut [f64]) {
        let row = self.shape.node(prefix);
        let probs: Vec<f64> = self.row_log_probs(row).into_iter().map(f64::exp).collect();
        add_score(&probs, row, token, weight, grad);
    }

    pub fn token_score(&self, prefix: &[usize], token: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim()];
        self.add_token_score(prefix, token, 1.0, &mut g);
        g
    }

    /// Sequence score: sum of per-token conditional scores.
    pub fn seq_score(&self, seq: &[usize]) -> Result<Vec<f64>> {
        self.shape.check_sequence(seq)?;
        let mut g = vec![0.0; self.param_dim()];
        for t in 0..seq.len() {
            self.add_token_score(&seq[..t], seq[t], 1.0, &mut g);
        }
        Ok(g)
    }

    /// Token-level `KL(pi(.|prefix) || other(.|prefix))`.
    pub fn kl_at(&self, other: &ArPolicy, prefix: &[usize]) -> f64 {
        kl_from_logs(&self.log_probs_at(prefix), &other.log_probs_at(prefix))
    }

    pub fn sample_seq<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.shape.horizon);
        for _ in 0..self.shape.horizon {
            let tok = sample_categorical(&self.probs_at(&seq), rng);
            seq.push(tok);
        }
        seq
    }

    /// Probability of every sequence, in [`SeqShape::decode`] order.
    pub fn enumerate_probs(&self) -> Vec<f64> {
        self.shape
            .sequences()
            .map(|s| self.seq_logprob(&s).expect("valid sequence").exp())
            .collect()
    }

    pub fn check_same_shape(&self, other: &ArPolicy) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape("policies have different sequence shapes".into()));
        }
        Ok(())
    }
}

/// A flat parameter-gradient vector plus the estimator that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub grad: Vec<f64>,
    pub estimator_id: String,
    pub n: usize,
    pub beta: f64,
}

impl GradEstimate {
    pub fn new(estimator_id: impl Into<String>, grad: Vec<f64>, n: usize, beta: f64) -> Self {
        Self {
            grad,
            estimator_id: estimator_id.into(),
            n,
            beta,
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.grad)
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}
