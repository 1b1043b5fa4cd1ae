//! The outer training loop: periodic data collection, optimistic
//! evaluation, mirror-ascent policy updates, per-iteration metrics, and
//! the uniform output-policy draw.
//!
//! Iterations are numbered `k = 1..=K`. Fresh episodes are collected
//! whenever `k` is congruent to 1 modulo the update period `m` and reused
//! otherwise, so a run performs `ceil(K / m)` collection rounds and
//! consumes exactly `ceil(K / m) * N` episodes. Each record carries the
//! iteration its dataset was collected at (`t_k`), the optimistic start
//! value, the exact value of the current policy, and bonus/optimism
//! diagnostics computed against the exact model.

use crate::env::{sample_episode, Env, TabularMdp};
use crate::error::{Error, Result};
use crate::ope::{
    self, default_alpha_linear, default_alpha_tabular, default_beta_general, mean_bonus_under,
    split_dataset, EpisodeDataset, FunctionClass, Truncation, ValueEstimate,
};
use crate::oracle::{self, bellman_apply, policy_difference_check, value_iteration};
use crate::policy::PolicyState;
use crate::rng::{stream, StreamId};
use rand::Rng as _;

/// Which optimistic evaluator the loop calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OpeKind {
    #[default]
    Tabular,
    Linear,
    General,
}

/// Inputs of one training run. All fields are public; `validate` checks
/// the hard constraints and returns soft warnings (currently only the
/// smoothness precondition `eta * m * H^2 <= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Number of mirror-ascent iterations `K`.
    pub iterations: usize,
    /// Episodes per collection round `N`.
    pub batch_size: usize,
    /// Collection period `m`: fresh data every `m` iterations.
    pub update_period: usize,
    /// Mirror-ascent step size.
    pub eta: f64,
    /// Multiplier on the default bonus scales.
    pub alpha_scale: f64,
    /// Ridge regularizer for the linear evaluator.
    pub lambda: f64,
    /// Confidence width for the general evaluator; `None` uses the
    /// default formula at `alpha_scale`.
    pub beta: Option<f64>,
    pub ope: OpeKind,
    pub seed: u64,
    /// Failure probability inside the default scale formulas.
    pub delta: f64,
    pub truncation: Truncation,
    /// Record the evaluation-consistency residual each iteration.
    pub record_invariants: bool,
    /// Return every iterate's policy in the result.
    pub record_policies: bool,
    /// Explicit class for the general evaluator. When absent, a
    /// realizable class is built each iteration from the exact model.
    pub general_class: Option<FunctionClass>,
}

impl RunConfig {
    /// A tabular-evaluator config with default scales.
    pub fn new(iterations: usize, batch_size: usize, update_period: usize, eta: f64) -> Self {
        RunConfig {
            iterations,
            batch_size,
            update_period,
            eta,
            alpha_scale: 1.0,
            lambda: 1.0,
            beta: None,
            ope: OpeKind::Tabular,
            seed: 0,
            delta: 0.05,
            truncation: Truncation::PerStep,
            record_invariants: false,
            record_policies: false,
            general_class: None,
        }
    }

    /// Hard validation plus soft warnings for `horizon`.
    pub fn validate(&self, horizon: usize) -> Result<Vec<String>> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.update_period == 0 {
            return Err(Error::Config("update period must be >= 1".into()));
        }
        if self.batch_size < horizon {
            return Err(Error::Config(format!(
                "batch size {} is below the horizon {horizon}; every collection must fill all blocks",
                self.batch_size
            )));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if !self.alpha_scale.is_finite() || self.alpha_scale < 0.0 {
            return Err(Error::Config("bonus scale must be >= 0".into()));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::Config("ridge regularizer must be > 0".into()));
        }
        if let Some(b) = self.beta {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::Config("confidence width must be >= 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.delta) || self.delta <= 0.0 {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        let mut warnings = Vec::new();
        let hsq = (horizon * horizon) as f64;
        if self.eta * self.update_period as f64 * hsq > 1.0 + 1e-12 {
            warnings.push(format!(
                "eta * m * H^2 = {:.4} exceeds 1; the policy-smoothness guarantee between refreshes does not apply",
                self.eta * self.update_period as f64 * hsq
            ));
        }
        Ok(warnings)
    }
}

/// Per-iteration diagnostics, all computed with the exact model.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Iteration number, 1-based.
    pub k: usize,
    /// Iteration whose collection round produced the dataset in use.
    pub t_k: usize,
    /// Optimistic start-state value of the current estimate.
    pub vbar1: f64,
    /// Exact start-state value of the current policy.
    pub v_pik: f64,
    /// `v_star - v_pik`.
    pub subopt: f64,
    /// Occupancy-weighted mean bonus per step under the current policy.
    pub mean_bonus: Vec<f64>,
    /// Cells `(h, s, a)` where the estimate drops below its own Bellman
    /// backup by more than 1e-9.
    pub optimism_violations: usize,
    /// Residual of the evaluation-consistency identity, when recorded.
    pub consistency_residual: Option<f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    /// Exact optimal start-state value of the environment.
    pub v_star: f64,
    /// Uniform draw from `1..=K`.
    pub output_index: usize,
    pub output_policy: PolicyState,
    /// Suboptimality of the output policy.
    pub output_subopt: f64,
    /// Total episodes consumed, `ceil(K / m) * N`.
    pub episodes_used: usize,
    /// Collection rounds performed, `ceil(K / m)`.
    pub collections: usize,
    pub warnings: Vec<String>,
    /// All iterate policies, when `record_policies` was set.
    pub policies: Option<Vec<PolicyState>>,
}

/// Runs the full loop on `env`. Deterministic: identical `(config, env)`
/// pairs produce identical results, independent of thread schedule, since
/// every episode draws from its own named RNG stream.
pub fn run(config: &RunConfig, env: &Env) -> Result<RunResult> {
    let tab = env.tabular();
    let warnings = config.validate(tab.horizon)?;
    let (hh, ss, aa) = (tab.horizon, tab.num_states, tab.num_actions);
    let (kk, nn, m) = (config.iterations, config.batch_size, config.update_period);

    let (star, _) = value_iteration(tab);
    let v_star = star.v.get(0, tab.start_state);

    let features = env.features();
    let alpha_tab = default_alpha_tabular(hh, ss, aa, kk, config.delta, config.alpha_scale);
    let alpha_lin =
        default_alpha_linear(hh, features.dim, kk, nn, config.delta, config.alpha_scale);
    let base_class = match (config.ope, &config.general_class) {
        (OpeKind::General, None) => Some(default_general_pool(hh, ss, aa)?),
        _ => None,
    };
    let class_size = config
        .general_class
        .as_ref()
        .map(FunctionClass::max_size)
        .or_else(|| base_class.as_ref().map(|c| c.max_size() + 1))
        .unwrap_or(1);
    let beta = config.beta.unwrap_or_else(|| {
        default_beta_general(hh, class_size, nn, kk, config.delta, config.alpha_scale)
    });

    let mut policy = PolicyState::uniform(hh, ss, aa, config.eta)?;
    let mut policies: Vec<PolicyState> = Vec::with_capacity(kk);
    let mut records: Vec<IterationRecord> = Vec::with_capacity(kk);
    let mut data: Option<EpisodeDataset> = None;
    let mut t_k = 0usize;
    let mut collections = 0usize;

    for k in 1..=kk {
        if (k - 1) % m == 0 {
            data = Some(collect_batch(tab, &policy, nn, config.seed, k)?);
            t_k = k;
            collections += 1;
        }
        let dataset = data.as_ref().expect("dataset exists from iteration 1");
        let est = match config.ope {
            OpeKind::Tabular => ope::ope_tabular(&policy, dataset, alpha_tab)?,
            OpeKind::Linear => ope::ope_linear(
                &policy,
                dataset,
                features,
                alpha_lin,
                config.lambda,
                config.truncation,
            )?,
            OpeKind::General => match &config.general_class {
                Some(class) => ope::ope_general(&policy, dataset, beta, class)?,
                None => {
                    let base = base_class.as_ref().expect("pool built for general mode");
                    let class =
                        ope::build_realizable_class(tab, &policy, dataset, beta, base)?;
                    ope::ope_general(&policy, dataset, beta, &class)?
                }
            },
        };

        let exact = oracle::policy_eval_exact(tab, &policy)?;
        let v_pik = exact.v.get(0, tab.start_state);
        let consistency_residual = if config.record_invariants {
            Some(policy_difference_check(tab, &policy, &policy, &est.qbar)?.residual)
        } else {
            None
        };
        records.push(IterationRecord {
            k,
            t_k,
            vbar1: est.start_value(tab.start_state),
            v_pik,
            subopt: v_star - v_pik,
            mean_bonus: mean_bonus_under(&policy, &est, tab)?,
            optimism_violations: count_optimism_violations(tab, &policy, &est)?,
            consistency_residual,
        });
        policies.push(policy.clone());
        if k < kk {
            policy = policy.mirror_ascent_step(&est.qbar)?;
        }
    }

    let output_index = stream(config.seed, StreamId::OutputDraw).gen_range(0..kk) + 1;
    let output_policy = policies[output_index - 1].clone();
    let output_subopt = records[output_index - 1].subopt;
    Ok(RunResult {
        records,
        v_star,
        output_index,
        output_policy,
        output_subopt,
        episodes_used: collections * nn,
        collections,
        warnings,
        policies: config.record_policies.then_some(policies),
    })
}

/// Collects `n` episodes for the round started at iteration `k`, each
/// from its own RNG stream so any evaluation order yields the same batch.
fn collect_batch(
    env: &TabularMdp,
    policy: &PolicyState,
    n: usize,
    seed: u64,
    k: usize,
) -> Result<EpisodeDataset> {
    let episodes: Vec<_> = (0..n)
        .map(|i| {
            let mut rng = stream(
                seed,
                StreamId::Episode {
                    round: k as u64,
                    index: i as u64,
                },
            );
            sample_episode(env, policy, &mut rng)
        })
        .collect();
    split_dataset(&episodes, env.horizon)
}

/// Counts cells where `Qbar_h < (T^policy Qbar_{h+1})(s, a) - 1e-9`.
fn count_optimism_violations(
    env: &TabularMdp,
    policy: &PolicyState,
    est: &ValueEstimate,
) -> Result<usize> {
    let mut violations = 0;
    for h in 0..env.horizon {
        let backup = if h + 1 < env.horizon {
            bellman_apply(env, policy, h, est.qbar.step(h + 1))?
        } else {
            bellman_apply(env, policy, h, &[])?
        };
        violations += est
            .qbar
            .step(h)
            .iter()
            .zip(&backup)
            .filter(|(q, b)| **q < **b - 1e-9)
            .count();
    }
    Ok(violations)
}

/// The fallback candidate pool for the general evaluator: five constant
/// tables per step spanning `[0, H - h]`.
fn default_general_pool(hh: usize, ss: usize, aa: usize) -> Result<FunctionClass> {
    let members = (0..hh)
        .map(|h| {
            let cap = (hh - h) as f64;
            (0..5)
                .map(|i| vec![cap * i as f64 / 4.0; ss * aa])
                .collect()
        })
        .collect();
    FunctionClass::new(hh, ss, aa, members)
}

/// Scale multipliers for [`recommended_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleScales {
    pub c_iterations: f64,
    pub c_batch: f64,
    pub c_eta: f64,
    pub c_period: f64,
    pub delta: f64,
}

impl Default for ScheduleScales {
    fn default() -> Self {
        ScheduleScales {
            c_iterations: 1.0,
            c_batch: 1.0,
            c_eta: 1.0,
            c_period: 1.0,
            delta: 0.05,
        }
    }
}

/// A full parameter schedule for a target accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub update_period: usize,
    pub eta: f64,
}

/// The analysis-backed parameter schedule for target accuracy `epsilon`:
///
/// - `K = ceil(c_K * H^4 * ln|A| / eps^2)`, at least 1;
/// - `N = ceil(c_N * L * ln^2(L * K / delta) / eps^2)` rounded up to a
///   multiple of `H`;
/// - `eta = c_eta * eps / H^3`;
/// - `m = max(1, floor(c_m * H / eps))`, capped so `eta * m * H^2 <= 1`.
///
/// `complexity` is the statistical complexity `L` of the evaluator in
/// use; see [`complexity_tabular`] and [`complexity_linear`].
pub fn recommended_schedule(
    epsilon: f64,
    horizon: usize,
    num_actions: usize,
    complexity: f64,
    scales: ScheduleScales,
) -> Result<Schedule> {
    if horizon == 0 || num_actions == 0 {
        return Err(Error::Config("schedule needs H >= 1 and |A| >= 1".into()));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon > horizon as f64 {
        return Err(Error::Config(format!(
            "target accuracy must lie in (0, H], got {epsilon}"
        )));
    }
    if !complexity.is_finite() || complexity < 1.0 {
        return Err(Error::Config("complexity measure must be >= 1".into()));
    }
    for c in [
        scales.c_iterations,
        scales.c_batch,
        scales.c_eta,
        scales.c_period,
    ] {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::Config("scale multipliers must be > 0".into()));
        }
    }
    if !(scales.delta > 0.0 && scales.delta < 1.0) {
        return Err(Error::Config("delta must lie in (0, 1)".into()));
    }
    let hf = horizon as f64;
    let eps2 = epsilon * epsilon;
    let k = (scales.c_iterations * hf.powi(4) * (num_actions as f64).ln() / eps2)
        .ceil()
        .max(1.0) as usize;
    let log = (complexity * k as f64 / scales.delta).ln().max(0.0);
    let n_raw = (scales.c_batch * complexity * log * log / eps2).ceil().max(1.0) as usize;
    let batch_size = n_raw.div_ceil(horizon) * horizon;
    let eta = scales.c_eta * epsilon / hf.powi(3);
    let cap = (1.0 / (eta * hf * hf)).floor() as usize;
    let period = ((scales.c_period * hf / epsilon).floor() as usize)
        .min(cap)
        .max(1);
    Ok(Schedule {
        iterations: k,
        batch_size,
        update_period: period,
        eta,
    })
}

/// Statistical complexity of the tabular evaluator, `S * A * H^3`.
pub fn complexity_tabular(num_states: usize, num_actions: usize, horizon: usize) -> f64 {
    (num_states * num_actions) as f64 * (horizon as f64).powi(3)
}

/// Statistical complexity of the ridge evaluator, `d^2 * H^3`.
pub fn complexity_linear(dim: usize, horizon: usize) -> f64 {
    (dim * dim) as f64 * (horizon as f64).powi(3)
}
