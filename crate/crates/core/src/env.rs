//! Exactly enumerable environments.
//!
//! A [`TabularEnv`] holds one reward row and one reference distribution per
//! prompt, plus the prompt distribution `rho`. A [`TokenEnv`] describes an
//! autoregressive world over `V^T` token sequences with prefix-indexed
//! reference conditionals and (optionally) per-token rewards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ArPolicy;

/// Default bound on the number of outcomes any exact enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 16;

const SIMPLEX_TOL: f64 = 1e-12;
const TELESCOPE_TOL: f64 = 1e-10;

fn check_simplex(row: &[f64], what: &str, strictly_positive: bool) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sums to {sum}, expected 1")));
    }
    for &p in row {
        if !p.is_finite() || p < 0.0 || (strictly_positive && p <= 0.0) {
            return Err(Error::invalid(format!(
                "{what} has entry {p}; full support is required"
            )));
        }
    }
    Ok(())
}

/// Sequence-level prompt/response world with dense `r[x][y]` and `pi_ref[x][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularDoc", into = "TabularDoc")]
pub struct TabularEnv {
    num_prompts: usize,
    num_responses: usize,
    rewards: Vec<f64>,
    prompt_weights: Vec<f64>,
    ref_probs: Vec<f64>,
    ref_log_probs: Vec<f64>,
}

impl TabularEnv {
    /// Builds and validates an environment from row-major tables.
    pub fn new(
        num_prompts: usize,
        num_responses: usize,
        rewards: Vec<f64>,
        prompt_weights: Vec<f64>,
        ref_probs: Vec<f64>,
    ) -> Result<Self> {
        if num_prompts == 0 || num_responses == 0 {
            return Err(Error::invalid("environment sizes must be positive"));
        }
        let cells = num_prompts * num_responses;
        if rewards.len() != cells || ref_probs.len() != cells || prompt_weights.len() != num_prompts
        {
            return Err(Error::Shape(format!(
                "expected {num_prompts}x{num_responses} tables and {num_prompts} prompt weights"
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("reward {r} is not finite")));
        }
        check_simplex(&prompt_weights, "prompt_weights", false)?;
        for x in 0..num_prompts {
            let row = &ref_probs[x * num_responses..(x + 1) * num_responses];
            check_simplex(row, &format!("ref_probs[{x}]"), true)?;
        }
        let ref_log_probs = ref_probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            num_prompts,
            num_responses,
            rewards,
            prompt_weights,
            ref_probs,
            ref_log_probs,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn param_dim(&self) -> usize {
        self.num_prompts * self.num_responses
    }

    pub fn reward(&self, x: usize, y: usize) -> f64 {
        self.rewards[x * self.num_responses + y]
    }

    pub fn reward_row(&self, x: usize) -> &[f64] {
        &self.rewards[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn prompt_weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    pub fn ref_prob_row(&self, x: usize) -> &[f64] {
        &self.ref_probs[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn ref_log_prob_row(&self, x: usize) -> &[f64] {
        &self.ref_log_probs[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn ref_logprob(&self, x: usize, y: usize) -> f64 {
        self.ref_log_probs[x * self.num_responses + y]
    }

    /// Re-checks every type invariant.
    pub fn validate(&self) -> Result<()> {
        Self::new(
            self.num_prompts,
            self.num_responses,
            self.rewards.clone(),
            self.prompt_weights.clone(),
            self.ref_probs.clone(),
        )
        .map(|_| ())
    }

    pub fn check_index(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.num_prompts || y >= self.num_responses {
            return Err(Error::invalid(format!(
                "index ({x}, {y}) outside {}x{}",
                self.num_prompts, self.num_responses
            )));
        }
        Ok(())
    }

    /// Samples a prompt from `rho`.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.prompt_weights, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave acc slightly below 1; fall back to the last
    // outcome with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularDoc {
    rewards: Vec<Vec<f64>>,
    ref_probs: Vec<Vec<f64>>,
    prompt_weights: Vec<f64>,
}

impl TryFrom<TabularDoc> for TabularEnv {
    type Error = Error;

    fn try_from(doc: TabularDoc) -> Result<Self> {
        let num_prompts = doc.rewards.len();
        let num_responses = doc.rewards.first().map_or(0, Vec::len);
        if doc.rewards.iter().any(|r| r.len() != num_responses)
            || doc.ref_probs.len() != num_prompts
            || doc.ref_probs.iter().any(|r| r.len() != num_responses)
        {
            return Err(Error::Shape("ragged reward or ref_probs rows".into()));
        }
        TabularEnv::new(
            num_prompts,
            num_responses,
            doc.rewards.concat(),
            doc.prompt_weights,
            doc.ref_probs.concat(),
        )
    }
}

impl From<TabularEnv> for TabularDoc {
    fn from(env: TabularEnv) -> Self {
        let rows = |v: &[f64]| v.chunks(env.num_responses).map(<[f64]>::to_vec).collect();
        TabularDoc {
            rewards: rows(&env.rewards),
            ref_probs: rows(&env.ref_probs),
            prompt_weights: env.prompt_weights.clone(),
        }
    }
}

/// One prompt, two responses, `r = [1, 0]`, uniform reference.
pub fn canonical_env() -> TabularEnv {
    TabularEnv::new(1, 2, vec![1.0, 0.0], vec![1.0], vec![0.5, 0.5])
        .expect("canonical environment is valid")
}

fn dirichlet_row<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..len)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            e.max(1e-6)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Seeded random environment: Dirichlet(1) reference rows and prompt
/// weights, rewards uniform in `[0, reward_scale]`.
pub fn random_env(
    seed: u64,
    num_prompts: usize,
    num_responses: usize,
    reward_scale: f64,
) -> Result<TabularEnv> {
    if num_prompts == 0 || num_responses == 0 {
        return Err(Error::invalid("environment sizes must be positive"));
    }
    if !(reward_scale > 0.0 && reward_scale.is_finite()) {
        return Err(Error::invalid(format!(
            "reward_scale must be positive, got {reward_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards = (0..num_prompts * num_responses)
        .map(|_| rng.random::<f64>() * reward_scale)
        .collect();
    let mut ref_probs = Vec::with_capacity(num_prompts * num_responses);
    for _ in 0..num_prompts {
        ref_probs.extend(dirichlet_row(num_responses, &mut rng));
    }
    let prompt_weights = dirichlet_row(num_prompts, &mut rng);
    TabularEnv::new(num_prompts, num_responses, rewards, prompt_weights, ref_probs)
}

/// Prefix bookkeeping for sequences of `horizon` tokens over `vocab` symbols.
///
/// Prefixes are numbered by length, then lexicographically (first token most
/// significant). Prefixes of length `< horizon` are the *rows* that carry a
/// conditional distribution; full-length prefixes are leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqShape {
    pub vocab: usize,
    pub horizon: usize,
}

impl SeqShape {
    pub fn new(vocab: usize, horizon: usize, cap: usize) -> Result<Self> {
        if vocab == 0 || horizon == 0 {
            return Err(Error::invalid("vocab and horizon must be positive"));
        }
        let required = (vocab as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
        if required > cap as u128 {
            return Err(Error::Capacity { required, cap });
        }
        Ok(Self { vocab, horizon })
    }

    pub fn num_sequences(&self) -> usize {
        self.vocab.pow(self.horizon as u32)
    }

    fn offset(&self, len: usize) -> usize {
        (0..len).map(|t| self.vocab.pow(t as u32)).sum()
    }

    /// Number of prefixes with a conditional distribution (length < T).
    pub fn num_rows(&self) -> usize {
        self.offset(self.horizon)
    }

    /// Number of prefixes of every length 0..=T.
    pub fn num_nodes(&self) -> usize {
        self.offset(self.horizon + 1)
    }

    pub fn param_dim(&self) -> usize {
        self.num_rows() * self.vocab
    }

    /// Index of a prefix among all nodes; coincides with its row index when
    /// `prefix.len() < horizon`.
    pub fn node(&self, prefix: &[usize]) -> usize {
        let code = prefix.iter().fold(0, |acc, &tok| acc * self.vocab + tok);
        self.offset(prefix.len()) + code
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut seq = vec![0; self.horizon];
        for slot in seq.iter_mut().rev() {
            *slot = index % self.vocab;
            index /= self.vocab;
        }
        seq
    }

    pub fn sequences(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.num_sequences()).map(|i| self.decode(i))
    }

    pub fn check_sequence(&self, seq: &[usize]) -> Result<()> {
        if seq.len() != self.horizon {
            return Err(Error::Shape(format!(
                "sequence length {} but horizon is {}",
                seq.len(),
                self.horizon
            )));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::invalid(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }
}

/// Autoregressive environment with prefix-indexed reference conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TokenDoc", into = "TokenDoc")]
pub struct TokenEnv {
    shape: SeqShape,
    ref_probs: Vec<f64>,
    seq_reward: Vec<f64>,
    token_reward: Option<Vec<f64>>,
}

impl TokenEnv {
    pub fn new(
        shape: SeqShape,
        ref_probs: Vec<f64>,
        seq_reward: Vec<f64>,
        token_reward: Option<Vec<f64>>,
    ) -> Result<Self> {
        let v = shape.vocab;
        if ref_probs.len() != shape.param_dim() || seq_reward.len() != shape.num_sequences() {
            return Err(Error::Shape(format!(
                "expected {} conditional entries and {} sequence rewards",
                shape.param_dim(),
                shape.num_sequences()
            )));
        }
        for (row, chunk) in ref_probs.chunks(v).enumerate() {
            check_simplex(chunk, &format!("ref_probs row {row}"), true)?;
        }
        if seq_reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("sequence rewards must be finite"));
        }
        if let Some(tr) = &token_reward {
            if tr.len() != shape.param_dim() || tr.iter().any(|r| !r.is_finite()) {
                return Err(Error::Shape("token_reward must be a finite rows x vocab table".into()));
            }
            for (i, seq) in shape.sequences().enumerate() {
                let total: f64 = (0..shape.horizon)
                    .map(|t| tr[shape.node(&seq[..t]) * v + seq[t]])
                    .sum();
                if (total - seq_reward[i]).abs() > TELESCOPE_TOL {
                    return Err(Error::invalid(format!(
                        "per-token rewards of sequence {seq:?} sum to {total}, not {}",
                        seq_reward[i]
                    )));
                }
            }
        }
        Ok(Self {
            shape,
            ref_probs,
            seq_reward,
            token_reward,
        })
    }

    pub fn shape(&self) -> SeqShape {
        self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon
    }

    pub fn seq_reward(&self, seq: &[usize]) -> f64 {
        let idx = self.shape.node(seq) - self.shape.num_rows();
        self.seq_reward[idx]
    }

    pub fn has_token_rewards(&self) -> bool {
        self.token_reward.is_some()
    }

    /// Reward for emitting `token` after `prefix`, if per-token rewards exist.
    pub fn token_reward(&self, prefix: &[usize], token: usize) -> Option<f64> {
        self.token_reward
            .as_ref()
            .map(|tr| tr[self.shape.node(prefix) * self.shape.vocab + token])
    }

    pub fn ref_row(&self, prefix: &[usize]) -> &[f64] {
        let r = self.shape.node(prefix);
        &self.ref_probs[r * self.shape.vocab..(r + 1) * self.shape.vocab]
    }

    /// The reference policy as an autoregressive softmax policy.
    pub fn ref_policy(&self) -> ArPolicy {
        ArPolicy::from_logits(self.shape, self.ref_probs.iter().map(|p| p.ln()).collect())
            .expect("reference rows are finite")
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(
            self.shape,
            self.ref_probs.clone(),
            self.seq_reward.clone(),
            self.token_reward.clone(),
        )
        .map(|_| ())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenDoc {
    vocab_size: usize,
    horizon: usize,
    rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_rewards: Option<Vec<Vec<f64>>>,
    ref_probs: Vec<Vec<f64>>,
}

impl TryFrom<TokenDoc> for TokenEnv {
    type Error = Error;

    fn try_from(doc: TokenDoc) -> Result<Self> {
        let shape = SeqShape::new(doc.vocab_size, doc.horizon, DEFAULT_ENUMERATION_CAP)?;
        if doc.ref_probs.iter().any(|r| r.len() != shape.vocab) {
            return Err(Error::Shape("ref_probs rows must have vocab_size entries".into()));
        }
        TokenEnv::new(
            shape,
            doc.ref_probs.concat(),
            doc.rewards,
            doc.token_rewards.map(|t| t.concat()),
        )
    }
}

impl From<TokenEnv> for TokenDoc {
    fn from(env: TokenEnv) -> Self {
        let v = env.shape.vocab;
        let rows = |t: &[f64]| t.chunks(v).map(<[f64]>::to_vec).collect::<Vec<_>>();
        TokenDoc {
            vocab_size: v,
            horizon: env.shape.horizon,
            rewards: env.seq_reward.clone(),
            token_rewards: env.token_reward.as_deref().map(rows),
            ref_probs: rows(&env.ref_probs),
        }
    }
}

/// Either kind of environment, as found in a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnyEnv {
    Token(TokenEnv),
    Tabular(TabularEnv),
}

/// Binary-vocabulary token world: each token equal to 1 earns `match_reward`.
/// The reference policy is uniform.
pub fn token_env_binary(horizon: usize, match_reward: f64) -> Result<TokenEnv> {
    let shape = SeqShape::new(2, horizon, DEFAULT_ENUMERATION_CAP)?;
    let ref_probs = vec![0.5; shape.param_dim()];
    let token_reward: Vec<f64> = (0..shape.num_rows())
        .flat_map(|_| [0.0, match_reward])
        .collect();
    let seq_reward = shape
        .sequences()
        .map(|seq| match_reward * seq.iter().filter(|&&t| t == 1).count() as f64)
        .collect();
    TokenEnv::new(shape, ref_probs, seq_reward, Some(token_reward))
}
