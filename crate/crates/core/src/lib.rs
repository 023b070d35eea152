//! Exact-enumeration laboratory for consistency-based regularized policy
//! optimization (AGRO) and its gradient estimators.
//!
//! Every environment here is small enough that expectations over prompts,
//! responses, sample tuples and token sequences can be computed exactly. The
//! [`oracle`] module uses that to provide ground truth, and the stochastic
//! estimators in [`grad`] and [`tokenred`] are checked against it.
//!
//! Layout:
//! - [`env`]: tabular and autoregressive environments (rewards, `pi_ref`, `rho`).
//! - [`policy`]: softmax policies with analytic scores.
//! - [`oracle`]: optimal policy, objectives, losses, exact gradients, KL metrics.
//! - [`grad`]: sequence-level estimators (off/on-policy AGRO, RLOO, KL-PG, ...).
//! - [`tokenred`]: token-level variance-reduced regularizer estimators.
//! - [`trainer`]: SGD loop with on-policy, fixed-behavior and replay sampling.
//! - [`cli`]: command implementations behind the `agro-lab` binary.

pub mod cli;
pub mod env;
pub mod error;
pub mod grad;
pub mod math;
pub mod oracle;
pub mod policy;
pub mod stats;
pub mod svg;
pub mod tokenred;
pub mod trainer;
pub mod verify;

pub use env::{canonical_env, random_env, token_env_binary, SeqShape, TabularEnv, TokenEnv};
pub use error::{Error, Result};
pub use grad::{Estimator, SampleBatch, ValueHead};
pub use policy::{ArPolicy, GradEstimate, SoftmaxPolicy};
