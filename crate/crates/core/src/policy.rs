//! Softmax policies over accumulated logits.
//!
//! A policy stores one logit per `(h, s, a)` and plays
//! `pi_h(a|s) = exp(logit) / sum_a' exp(logit')`. The mirror-ascent update
//! adds `eta * Qbar` to the logits, so after k updates the logits equal
//! `eta` times the running sum of the evaluated action values. Logits are
//! kept max-subtracted per `(h, s)`, which pins them to `(-inf, 0]` and
//! keeps every softmax denominator in `[1, A]` no matter how many updates
//! accumulate.

use crate::error::{Error, Result};
use crate::tables::QTable;
use rand::Rng;

/// Anything that assigns action probabilities per `(h, s)`.
///
/// Exact-oracle routines are generic over this trait so they can evaluate
/// both softmax iterates and deterministic reference policies.
pub trait StochasticPolicy {
    fn horizon(&self) -> usize;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;

    /// Probabilities over actions at `(h, s)`; sums to 1.
    fn probs(&self, h: usize, s: usize) -> Vec<f64>;

    fn action_prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs(h, s)[a]
    }
}

/// Softmax policy state: logits, step size, and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    eta: f64,
    iteration: usize,
    logits: QTable,
}

impl PolicyState {
    /// The uniform policy (all logits zero) at iteration 1.
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize, eta: f64) -> Result<Self> {
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(Error::Invalid(format!(
                "policy dimensions must be positive, got H={horizon}, S={num_states}, A={num_actions}"
            )));
        }
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::Invalid(format!("eta must be finite and >= 0, got {eta}")));
        }
        Ok(PolicyState {
            eta,
            iteration: 1,
            logits: QTable::zeros(horizon, num_states, num_actions),
        })
    }

    /// Rebuilds a policy from raw parts, e.g. a parsed snapshot.
    pub fn from_parts(eta: f64, iteration: usize, logits: QTable) -> Result<Self> {
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::Invalid(format!("eta must be finite and >= 0, got {eta}")));
        }
        if iteration == 0 {
            return Err(Error::Invalid("iteration counter is 1-based".into()));
        }
        if !logits.is_finite() {
            return Err(Error::Invalid("logits contain a non-finite value".into()));
        }
        let mut p = PolicyState { eta, iteration, logits };
        p.shift_logits();
        Ok(p)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// 1-based iteration counter; incremented by every mirror-ascent step.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Max-subtracted logits, `(h, s, a)`-indexed.
    pub fn logits(&self) -> &QTable {
        &self.logits
    }

    /// One mirror-ascent step: multiply each action weight by
    /// `exp(eta * qbar)`, i.e. add `eta * qbar` to the logits.
    ///
    /// Fails if `qbar` has the wrong shape or a non-finite entry.
    pub fn mirror_ascent_step(&self, qbar: &QTable) -> Result<PolicyState> {
        check_shape("mirror_ascent_step", self, qbar)?;
        if !qbar.is_finite() {
            return Err(Error::Invalid(
                "mirror_ascent_step: action-value table contains a non-finite entry".into(),
            ));
        }
        let mut next = QTable::zeros(self.logits.horizon, self.logits.num_states, self.logits.num_actions);
        for h in 0..self.logits.horizon {
            for s in 0..self.logits.num_states {
                for a in 0..self.logits.num_actions {
                    next.set(h, s, a, self.logits.get(h, s, a) + self.eta * qbar.get(h, s, a));
                }
            }
        }
        let mut p = PolicyState {
            eta: self.eta,
            iteration: self.iteration + 1,
            logits: next,
        };
        p.shift_logits();
        Ok(p)
    }

    /// Action probabilities at `(h, s)`.
    pub fn action_probs(&self, h: usize, s: usize) -> Vec<f64> {
        let row = self.logits.row(h, s);
        // Logits are <= 0 with at least one zero, so every exp is in (0, 1]
        // and the sum is in [1, A]: no overflow and no zero denominator.
        let mut probs: Vec<f64> = row.iter().map(|l| l.exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        probs
    }

    /// Samples an action at `(h, s)` by inverse CDF, consuming one uniform.
    pub fn sample_action(&self, h: usize, s: usize, rng: &mut impl Rng) -> usize {
        let probs = self.action_probs(h, s);
        sample_index(&probs, rng.gen::<f64>())
    }

    fn shift_logits(&mut self) {
        for h in 0..self.logits.horizon {
            for s in 0..self.logits.num_states {
                let max = self
                    .logits
                    .row(h, s)
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                for a in 0..self.logits.num_actions {
                    let v = self.logits.get(h, s, a);
                    self.logits.set(h, s, a, v - max);
                }
            }
        }
    }
}

impl StochasticPolicy for PolicyState {
    fn horizon(&self) -> usize {
        self.logits.horizon
    }
    fn num_states(&self) -> usize {
        self.logits.num_states
    }
    fn num_actions(&self) -> usize {
        self.logits.num_actions
    }
    fn probs(&self, h: usize, s: usize) -> Vec<f64> {
        self.action_probs(h, s)
    }
}

/// A deterministic policy: one action per `(h, s)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Chosen action per `(h, s)`, row-major.
    pub actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.num_states + s]
    }
}

impl StochasticPolicy for DeterministicPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn probs(&self, h: usize, s: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.num_actions];
        p[self.action(h, s)] = 1.0;
        p
    }
    fn action_prob(&self, h: usize, s: usize, a: usize) -> f64 {
        if self.action(h, s) == a {
            1.0
        } else {
            0.0
        }
    }
}

/// Inverse-CDF draw from `probs` given a uniform `u` in `[0, 1)`.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_shape(context: &'static str, policy: &PolicyState, q: &QTable) -> Result<()> {
    if q.horizon != policy.horizon() {
        return Err(Error::Dimension {
            context,
            expected: policy.horizon(),
            got: q.horizon,
        });
    }
    if q.num_states != policy.num_states() {
        return Err(Error::Dimension {
            context,
            expected: policy.num_states(),
            got: q.num_states,
        });
    }
    if q.num_actions != policy.num_actions() {
        return Err(Error::Dimension {
            context,
            expected: policy.num_actions(),
            got: q.num_actions,
        });
    }
    Ok(())
}
