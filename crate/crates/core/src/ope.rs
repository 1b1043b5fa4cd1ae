//! Optimistic off-policy evaluation from a split episode dataset.
//!
//! All three evaluators share one structure: split the episodes into `H`
//! disjoint blocks, use block `h` only for step `h`, and run a backward
//! pass that regresses `r + Vbar_{h+1}(s')` and adds an uncertainty bonus
//! so the resulting `Qbar_h` upper-bounds the Bellman backup of
//! `Qbar_{h+1}` with high probability. The block split keeps the step-`h`
//! data independent of `Vbar_{h+1}` (which is built from later blocks
//! only), which is what the optimism guarantee leans on.
//!
//! Evaluators:
//! - [`ope_tabular`]: empirical model plus count bonus `alpha / sqrt(J+1)`.
//! - [`ope_linear`]: ridge regression plus elliptical bonus
//!   `alpha * ||phi||_{(Sigma + lambda I)^{-1}}`.
//! - [`ope_general`]: confidence set over an explicit finite function
//!   class; the estimate is the pointwise sup over near-minimizers of the
//!   squared regression loss.

use crate::env::{FeatureMap, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{ridge_fit_dim, CovarianceState};
use crate::oracle::{self, bellman_apply};
use crate::policy::StochasticPolicy;
use crate::tables::{QTable, VTable};
use std::sync::atomic::{AtomicUsize, Ordering};

/// One transition tuple. `next_state` is `None` only for final-step
/// tuples, whose regression target has no continuation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTuple {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<usize>,
}

/// Episodes split into `H` disjoint per-step blocks.
///
/// Block `h` holds the step-`h` tuples of the `h`-th run of
/// `floor(N / H)` trajectories (by trajectory index); the remainder is
/// discarded. Reads are counted per block so tests can verify that an
/// evaluator touches each block exactly once per backward pass.
#[derive(Debug)]
pub struct EpisodeDataset {
    horizon: usize,
    per_step: usize,
    num_episodes: usize,
    blocks: Vec<Vec<StepTuple>>,
    access_counts: Vec<AtomicUsize>,
}

impl EpisodeDataset {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Tuples available per step, `floor(N / H)`.
    pub fn per_step(&self) -> usize {
        self.per_step
    }

    /// Episodes the dataset was built from, including any discarded tail.
    pub fn num_episodes(&self) -> usize {
        self.num_episodes
    }

    /// The step-`h` block. Each call increments the block's read counter.
    pub fn step_tuples(&self, h: usize) -> &[StepTuple] {
        self.access_counts[h].fetch_add(1, Ordering::Relaxed);
        &self.blocks[h]
    }

    /// Reads per block since construction or the last reset.
    pub fn access_counts(&self) -> Vec<usize> {
        self.access_counts
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset_access_counts(&self) {
        for c in &self.access_counts {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// A dataset with zero episodes in every block. Evaluators then see
    /// all-zero counts, which makes the bonus surface flat: useful as a
    /// no-data baseline.
    pub fn empty(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Invalid("dataset horizon must be positive".into()));
        }
        Ok(EpisodeDataset {
            horizon,
            per_step: 0,
            num_episodes: 0,
            blocks: vec![Vec::new(); horizon],
            access_counts: (0..horizon).map(|_| AtomicUsize::new(0)).collect(),
        })
    }
}

/// Splits `trajectories` into the `H` per-step blocks described on
/// [`EpisodeDataset`]. Fails when fewer than `horizon` episodes are given
/// or when an episode has the wrong length.
pub fn split_dataset(trajectories: &[Trajectory], horizon: usize) -> Result<EpisodeDataset> {
    if horizon == 0 {
        return Err(Error::Invalid("split_dataset: horizon must be positive".into()));
    }
    let n = trajectories.len();
    let per_step = n / horizon;
    if per_step == 0 {
        return Err(Error::Invalid(format!(
            "split_dataset: need at least H={horizon} episodes, got {n}"
        )));
    }
    let mut blocks = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut block = Vec::with_capacity(per_step);
        for t in &trajectories[h * per_step..(h + 1) * per_step] {
            if t.steps.len() != horizon {
                return Err(Error::Invalid(format!(
                    "split_dataset: episode has {} steps, expected {horizon}",
                    t.steps.len()
                )));
            }
            let s = &t.steps[h];
            if (h + 1 == horizon) != s.next_state.is_none() {
                return Err(Error::Invalid(
                    "split_dataset: next-state sentinel must appear exactly at the final step".into(),
                ));
            }
            block.push(StepTuple {
                state: s.state,
                action: s.action,
                reward: s.reward,
                next_state: s.next_state,
            });
        }
        blocks.push(block);
    }
    Ok(EpisodeDataset {
        horizon,
        per_step,
        num_episodes: n,
        blocks,
        access_counts: (0..horizon).map(|_| AtomicUsize::new(0)).collect(),
    })
}

/// Which upper clamp the ridge evaluator applies to its estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    /// Clamp step `h` to `[0, H - h]` (0-based), the tightest range a
    /// value at that step can occupy.
    #[default]
    PerStep,
    /// Clamp every step to `[0, H]`.
    FullHorizon,
}

impl Truncation {
    fn cap(self, horizon: usize, h: usize) -> f64 {
        match self {
            Truncation::PerStep => (horizon - h) as f64,
            Truncation::FullHorizon => horizon as f64,
        }
    }
}

/// Evaluator-specific internals kept alongside the estimate tables.
#[derive(Debug, Clone)]
pub enum EstimateKind {
    Tabular {
        /// Empirical transition rows `[h][s][a][s']`, uniform at unvisited cells.
        phat: Vec<f64>,
        /// Empirical mean rewards, zero at unvisited cells.
        rhat: QTable,
        /// Visit counts per `(h, s, a)`.
        counts: Vec<u64>,
        alpha: f64,
    },
    Linear {
        /// Ridge solutions per step, `[h][j]`.
        theta: Vec<Vec<f64>>,
        /// Regularized scatter matrices per step.
        cov: Vec<CovarianceState>,
        alpha: f64,
        lambda: f64,
        truncation: Truncation,
    },
    General {
        /// Indices of the class members inside each step's confidence set.
        confidence_sets: Vec<Vec<usize>>,
        /// Members available per step.
        class_sizes: Vec<usize>,
        beta: f64,
    },
}

/// An optimistic evaluation of one policy: action values, their
/// policy-averaged state values, the bonus surface, and the evaluator
/// internals.
#[derive(Debug, Clone)]
pub struct ValueEstimate {
    pub qbar: QTable,
    pub vbar: VTable,
    pub bonus: QTable,
    pub kind: EstimateKind,
}

impl ValueEstimate {
    /// Optimistic start-state value `Vbar_1(s1)`.
    pub fn start_value(&self, start_state: usize) -> f64 {
        self.vbar.get(0, start_state)
    }
}

/// Count-based bonus scale from the tabular analysis:
/// `scale * H * sqrt(ln(K * H * S * A / delta))`.
pub fn default_alpha_tabular(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    iterations: usize,
    delta: f64,
    scale: f64,
) -> f64 {
    let arg = (iterations.max(1) * horizon * num_states * num_actions) as f64 / delta;
    scale * horizon as f64 * arg.max(std::f64::consts::E).ln().sqrt()
}

/// Elliptical bonus scale from the ridge analysis:
/// `scale * H * sqrt(d * ln(K * N / delta))`.
pub fn default_alpha_linear(
    horizon: usize,
    dim: usize,
    iterations: usize,
    batch_size: usize,
    delta: f64,
    scale: f64,
) -> f64 {
    let arg = (iterations.max(1) * batch_size.max(1)) as f64 / delta;
    scale * horizon as f64 * (dim as f64 * arg.max(std::f64::consts::E).ln()).sqrt()
}

/// Confidence-set width from the finite-class analysis:
/// `scale * H^2 * ln(|F| * N * K / delta)`.
pub fn default_beta_general(
    horizon: usize,
    class_size: usize,
    batch_size: usize,
    iterations: usize,
    delta: f64,
    scale: f64,
) -> f64 {
    let arg = (class_size.max(1) * batch_size.max(1) * iterations.max(1)) as f64 / delta;
    scale * (horizon * horizon) as f64 * arg.max(std::f64::consts::E).ln()
}

/// Tabular optimistic evaluation: empirical model per block plus the
/// count bonus `alpha / sqrt(J + 1)`, truncated to `[0, H - h]`.
pub fn ope_tabular(
    policy: &impl StochasticPolicy,
    data: &EpisodeDataset,
    alpha: f64,
) -> Result<ValueEstimate> {
    check_alpha(alpha)?;
    let (hh, ss, aa) = policy_dims(policy, data)?;
    let mut phat = vec![0.0; hh * ss * aa * ss];
    let mut rhat = QTable::zeros(hh, ss, aa);
    let mut counts = vec![0u64; hh * ss * aa];
    let mut bonus = QTable::zeros(hh, ss, aa);
    let mut qbar = QTable::zeros(hh, ss, aa);
    let mut vbar = VTable::zeros(hh, ss);

    for h in (0..hh).rev() {
        // Empirical model for this step from its own block only.
        let tuples = data.step_tuples(h);
        let mut next_counts = vec![0u64; ss * aa * ss];
        let mut reward_sums = vec![0.0; ss * aa];
        for t in tuples {
            check_tuple(t, ss, aa, h + 1 == hh)?;
            let cell = t.state * aa + t.action;
            counts[h * ss * aa + cell] += 1;
            reward_sums[cell] += t.reward;
            if let Some(sn) = t.next_state {
                next_counts[cell * ss + sn] += 1;
            }
        }
        for s in 0..ss {
            for a in 0..aa {
                let cell = s * aa + a;
                let j = counts[h * ss * aa + cell];
                let base = (h * ss * aa + cell) * ss;
                if j == 0 {
                    for sn in 0..ss {
                        phat[base + sn] = 1.0 / ss as f64;
                    }
                } else {
                    for sn in 0..ss {
                        phat[base + sn] = next_counts[cell * ss + sn] as f64 / j as f64;
                    }
                    rhat.set(h, s, a, reward_sums[cell] / j as f64);
                }
                let b = alpha / ((j + 1) as f64).sqrt();
                bonus.set(h, s, a, b);
                let mut est = rhat.get(h, s, a) + b;
                if h + 1 < hh {
                    for sn in 0..ss {
                        est += phat[base + sn] * vbar.get(h + 1, sn);
                    }
                }
                qbar.set(h, s, a, est.min((hh - h) as f64));
            }
        }
        average_step(policy, &qbar, &mut vbar, h);
    }
    finish(
        qbar,
        vbar,
        bonus,
        EstimateKind::Tabular {
            phat,
            rhat,
            counts,
            alpha,
        },
    )
}

/// Ridge-regression optimistic evaluation with the elliptical bonus.
pub fn ope_linear(
    policy: &impl StochasticPolicy,
    data: &EpisodeDataset,
    features: &FeatureMap,
    alpha: f64,
    lambda: f64,
    truncation: Truncation,
) -> Result<ValueEstimate> {
    check_alpha(alpha)?;
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::Invalid(format!(
            "ridge evaluation needs lambda > 0, got {lambda}"
        )));
    }
    let (hh, ss, aa) = policy_dims(policy, data)?;
    if features.horizon != hh || features.num_states != ss || features.num_actions != aa {
        return Err(Error::Invalid(
            "ope_linear: feature map shape does not match the policy".into(),
        ));
    }
    let d = features.dim;
    let mut theta = vec![Vec::new(); hh];
    let mut cov = Vec::with_capacity(hh);
    let mut bonus = QTable::zeros(hh, ss, aa);
    let mut qbar = QTable::zeros(hh, ss, aa);
    let mut vbar = VTable::zeros(hh, ss);

    for h in (0..hh).rev() {
        let tuples = data.step_tuples(h);
        let mut rows = Vec::with_capacity(tuples.len());
        let mut targets = Vec::with_capacity(tuples.len());
        let mut sigma = CovarianceState::new(d, lambda)?;
        for t in tuples {
            check_tuple(t, ss, aa, h + 1 == hh)?;
            let phi = features.phi(h, t.state, t.action);
            let target = t.reward
                + match t.next_state {
                    Some(sn) => vbar.get(h + 1, sn),
                    None => 0.0,
                };
            sigma.accumulate(phi)?;
            rows.push(phi.to_vec());
            targets.push(target);
        }
        let th = ridge_fit_dim(d, &rows, &targets, lambda)?;
        let cap = truncation.cap(hh, h);
        for s in 0..ss {
            for a in 0..aa {
                let phi = features.phi(h, s, a);
                let b = alpha * sigma.quad_norm(phi)?;
                let mean: f64 = th.iter().zip(phi).map(|(t, p)| t * p).sum();
                bonus.set(h, s, a, b);
                qbar.set(h, s, a, (mean + b).clamp(0.0, cap));
            }
        }
        average_step(policy, &qbar, &mut vbar, h);
        theta[h] = th;
        cov.push(sigma);
    }
    cov.reverse(); // accumulated back to front
    finish(
        qbar,
        vbar,
        bonus,
        EstimateKind::Linear {
            theta,
            cov,
            alpha,
            lambda,
            truncation,
        },
    )
}

/// An explicit finite function class per step: candidate action-value
/// tables with entries in `[0, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionClass {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// `members[h]` is the nonempty list of flat `[s][a]` tables for step `h`.
    pub members: Vec<Vec<Vec<f64>>>,
}

impl FunctionClass {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        members: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let c = FunctionClass {
            horizon,
            num_states,
            num_actions,
            members,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != self.horizon {
            return Err(Error::Dimension {
                context: "function class steps",
                expected: self.horizon,
                got: self.members.len(),
            });
        }
        let cells = self.num_states * self.num_actions;
        let cap = self.horizon as f64;
        for (h, step) in self.members.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::Invalid(format!(
                    "function class has no members at step {h}"
                )));
            }
            for (i, table) in step.iter().enumerate() {
                if table.len() != cells {
                    return Err(Error::Dimension {
                        context: "function class member",
                        expected: cells,
                        got: table.len(),
                    });
                }
                if table
                    .iter()
                    .any(|v| !v.is_finite() || *v < -1e-9 || *v > cap + 1e-9)
                {
                    return Err(Error::Invalid(format!(
                        "function class member {i} at step {h} leaves [0, H]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest member count over steps.
    pub fn max_size(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Finite-class optimistic evaluation.
///
/// Per step the squared regression loss ranks all members; the confidence
/// set keeps those within `beta` of the minimum, and the estimate is the
/// pointwise maximum over the set. The set is computed once per step:
/// it does not depend on the query point.
pub fn ope_general(
    policy: &impl StochasticPolicy,
    data: &EpisodeDataset,
    beta: f64,
    class: &FunctionClass,
) -> Result<ValueEstimate> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Invalid(format!(
            "confidence width must be finite and >= 0, got {beta}"
        )));
    }
    class.validate()?;
    let (hh, ss, aa) = policy_dims(policy, data)?;
    if class.horizon != hh || class.num_states != ss || class.num_actions != aa {
        return Err(Error::Invalid(
            "ope_general: function class shape does not match the policy".into(),
        ));
    }
    let mut confidence_sets = Vec::with_capacity(hh);
    let mut bonus = QTable::zeros(hh, ss, aa);
    let mut qbar = QTable::zeros(hh, ss, aa);
    let mut vbar = VTable::zeros(hh, ss);

    for h in (0..hh).rev() {
        let tuples = data.step_tuples(h);
        let members = &class.members[h];
        let mut losses = vec![0.0; members.len()];
        for t in tuples {
            check_tuple(t, ss, aa, h + 1 == hh)?;
            let target = t.reward
                + match t.next_state {
                    Some(sn) => vbar.get(h + 1, sn),
                    None => 0.0,
                };
            let cell = t.state * aa + t.action;
            for (f, loss) in members.iter().zip(losses.iter_mut()) {
                let diff = f[cell] - target;
                *loss += diff * diff;
            }
        }
        let min_loss = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let set: Vec<usize> = (0..members.len())
            .filter(|&i| losses[i] <= min_loss + beta)
            .collect();
        for s in 0..ss {
            for a in 0..aa {
                let cell = s * aa + a;
                let mut hi = f64::NEG_INFINITY;
                let mut lo = f64::INFINITY;
                for &i in &set {
                    hi = hi.max(members[i][cell]);
                    lo = lo.min(members[i][cell]);
                }
                qbar.set(h, s, a, hi);
                bonus.set(h, s, a, hi - lo);
            }
        }
        average_step(policy, &qbar, &mut vbar, h);
        confidence_sets.push(set);
    }
    confidence_sets.reverse();
    let class_sizes = class.members.iter().map(Vec::len).collect();
    finish(
        qbar,
        vbar,
        bonus,
        EstimateKind::General {
            confidence_sets,
            class_sizes,
            beta,
        },
    )
}

/// Occupancy-weighted mean bonus per step under `policy` on `env`:
/// `sum_{s,a} d^policy_h(s) policy_h(a|s) bonus_h(s, a)`.
pub fn mean_bonus_under(
    policy: &impl StochasticPolicy,
    estimate: &ValueEstimate,
    env: &TabularMdp,
) -> Result<Vec<f64>> {
    let occ = oracle::occupancy(env, policy)?;
    let b = &estimate.bonus;
    if b.horizon != env.horizon || b.num_states != env.num_states || b.num_actions != env.num_actions
    {
        return Err(Error::Invalid(
            "mean_bonus_under: estimate shape does not match the model".into(),
        ));
    }
    let mut out = Vec::with_capacity(env.horizon);
    for h in 0..env.horizon {
        let mut total = 0.0;
        for s in 0..env.num_states {
            let mass = occ.get(h, s);
            if mass == 0.0 {
                continue;
            }
            let probs = policy.probs(h, s);
            for a in 0..env.num_actions {
                total += mass * probs[a] * b.get(h, s, a);
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// Builds a function class guaranteed to contain, at every step, the
/// exact Bellman backup of the estimate that [`ope_general`] will produce
/// from `data` with width `beta`, the realizability premise of the
/// finite-class guarantee, manufactured from the true model.
///
/// Starting from `base` (validated, and used as the candidate pool), the
/// builder walks steps from last to first; at each step it runs the
/// evaluator with the class assembled so far, computes the true backup of
/// the resulting `Vbar_{h+1}`, and inserts it as a member of step `h`.
/// Because the evaluator's step-`h` output depends only on later steps'
/// members, earlier insertions never invalidate later ones.
pub fn build_realizable_class(
    env: &TabularMdp,
    policy: &impl StochasticPolicy,
    data: &EpisodeDataset,
    beta: f64,
    base: &FunctionClass,
) -> Result<FunctionClass> {
    let mut class = base.clone();
    class.validate()?;
    let hh = env.horizon;
    for h in (0..hh).rev() {
        let est = ope_general(policy, data, beta, &class)?;
        let backup = if h + 1 < hh {
            bellman_apply(env, policy, h, est.qbar.step(h + 1))?
        } else {
            bellman_apply(env, policy, h, &[])?
        };
        if backup
            .iter()
            .any(|v| !(-1e-9..=hh as f64 + 1e-9).contains(v))
        {
            return Err(Error::Invalid(format!(
                "realizable member at step {h} leaves [0, H]; \
                 keep base members at step {} within [0, H - {}]",
                h + 1,
                h + 1
            )));
        }
        class.members[h].push(backup);
    }
    Ok(class)
}

fn policy_dims(
    policy: &impl StochasticPolicy,
    data: &EpisodeDataset,
) -> Result<(usize, usize, usize)> {
    if policy.horizon() != data.horizon() {
        return Err(Error::Dimension {
            context: "ope horizon",
            expected: data.horizon(),
            got: policy.horizon(),
        });
    }
    Ok((data.horizon(), policy.num_states(), policy.num_actions()))
}

fn check_tuple(t: &StepTuple, ss: usize, aa: usize, is_last: bool) -> Result<()> {
    let next_ok = match t.next_state {
        Some(sn) => !is_last && sn < ss,
        None => is_last,
    };
    if t.state >= ss || t.action >= aa || !next_ok || !t.reward.is_finite() {
        return Err(Error::Invalid(format!(
            "dataset tuple out of range: ({}, {}, {}, {:?})",
            t.state, t.action, t.reward, t.next_state
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Invalid(format!(
            "bonus scale must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

/// Writes `vbar[h] = E_{a ~ policy}[qbar[h]]` for one step.
fn average_step(policy: &impl StochasticPolicy, qbar: &QTable, vbar: &mut VTable, h: usize) {
    for s in 0..qbar.num_states {
        let probs = policy.probs(h, s);
        let v = probs
            .iter()
            .zip(qbar.row(h, s))
            .map(|(p, q)| p * q)
            .sum::<f64>();
        vbar.set(h, s, v);
    }
}

fn finish(qbar: QTable, vbar: VTable, bonus: QTable, kind: EstimateKind) -> Result<ValueEstimate> {
    if !qbar.is_finite() || !bonus.is_finite() || vbar.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(
            "optimistic evaluation produced a non-finite value".into(),
        ));
    }
    Ok(ValueEstimate {
        qbar,
        vbar,
        bonus,
        kind,
    })
}
