//! Optimistic natural policy gradient for episodic finite-horizon MDPs.
//!
//! The crate is organized around a small training loop: sample episodes
//! under the current softmax policy, build an optimistic action-value
//! estimate from the data (count-based, ridge-regression, or
//! confidence-set flavored), then take a mirror-ascent step on the
//! policy logits. Exact dynamic-programming oracles run alongside the
//! loop so every run can report true values, suboptimality, and
//! violations of the estimator guarantees.
//!
//! Modules:
//! - [`env`]: tabular and low-rank MDP models, episode sampling.
//! - [`oracle`]: exact value iteration, policy evaluation, occupancy
//!   measures, trajectory enumeration, and the policy-difference
//!   identity check.
//! - [`numerics`]: dense SPD solves backing the ridge estimator and
//!   elliptical bonuses.
//! - [`policy`]: softmax policies over accumulated logits and the
//!   mirror-ascent update.
//! - [`ope`]: dataset splitting and the three optimistic off-policy
//!   evaluators.
//! - [`driver`]: the iteration loop, schedules, and per-iteration
//!   records.
//! - [`textfmt`]: the flat text format used for environment files,
//!   policy snapshots, and estimate dumps.
//! - [`checks`]: the invariant suites behind `onpg check`.

pub mod checks;
pub mod driver;
pub mod env;
pub mod error;
pub mod numerics;
pub mod ope;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod tables;
pub mod textfmt;

pub use error::{Error, Result};
