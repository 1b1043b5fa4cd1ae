//! Self-contained invariant suites behind the `check` command.
//!
//! Each suite exercises one analytic property of the library at desk
//! scale and reports a pass/fail verdict with the measured metric. The
//! suites are intentionally independent of the unit tests so a packaged
//! binary can re-verify the mathematical contracts on any machine.

use crate::driver::{run, RunConfig};
use crate::env::{make_random_linear, make_random_tabular, sample_episode, Env, RewardNoise};
use crate::error::Result;
use crate::ope::{
    self, build_realizable_class, default_alpha_linear, default_alpha_tabular, mean_bonus_under,
    split_dataset, FunctionClass, Truncation,
};
use crate::oracle::{bellman_apply, policy_difference_check, trajectory_distribution};
use crate::policy::PolicyState;
use crate::rng::{stream, StreamId};
use crate::tables::QTable;
use rand::Rng;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    /// Instances, seeds, or iterations exercised.
    pub instances: usize,
    pub metric_name: &'static str,
    pub metric: f64,
    pub pass: bool,
    /// Human-readable bound the metric was held against.
    pub detail: String,
}

impl CheckReport {
    fn at_most(
        name: &'static str,
        instances: usize,
        metric_name: &'static str,
        metric: f64,
        bound: f64,
    ) -> Self {
        CheckReport {
            name,
            instances,
            metric_name,
            metric,
            pass: metric <= bound,
            detail: format!("require {metric_name} <= {bound}"),
        }
    }

    fn in_range(
        name: &'static str,
        instances: usize,
        metric_name: &'static str,
        metric: f64,
        lo: f64,
        hi: f64,
    ) -> Self {
        CheckReport {
            name,
            instances,
            metric_name,
            metric,
            pass: (lo..=hi).contains(&metric),
            detail: format!("require {metric_name} in [{lo}, {hi}]"),
        }
    }
}

/// Knobs shared by every suite. `alpha_scale` rescales the bonus terms so
/// a deliberately broken scale (for example 0.05) demonstrably flips the
/// optimism suites to failure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub alpha_scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            alpha_scale: 1.0,
        }
    }
}

/// Runs every suite in a fixed order.
pub fn run_all(options: CheckOptions) -> Result<Vec<CheckReport>> {
    Ok(vec![
        policy_difference_identity(options)?,
        optimism_tabular(options)?,
        optimism_linear(options)?,
        optimism_general_realizable(options)?,
        evaluation_consistency(options)?,
        policy_smoothness(options)?,
        bonus_decay_tabular(options)?,
        bonus_decay_linear(options)?,
    ])
}

pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

fn random_policy(
    hh: usize,
    ss: usize,
    aa: usize,
    rng: &mut impl Rng,
) -> Result<PolicyState> {
    let logits = QTable::from_fn(hh, ss, aa, |_, _, _| rng.gen::<f64>() * 4.0 - 2.0);
    PolicyState::from_parts(0.1, 1, logits)
}

/// The exact value-difference decomposition between any two policies
/// under any bounded action-value table, on 100 random instances with
/// S, A, H up to 6. An identity: the residual is numerical noise only.
pub fn policy_difference_identity(options: CheckOptions) -> Result<CheckReport> {
    let mut max_residual: f64 = 0.0;
    let instances = 100u64;
    for i in 0..instances {
        let mut rng = stream(options.seed, StreamId::Aux { index: 1000 + i });
        let ss = rng.gen_range(1..=6);
        let aa = rng.gen_range(1..=6);
        let hh = rng.gen_range(1..=6);
        let env = make_random_tabular(ss, aa, hh, RewardNoise::Deterministic, &mut rng);
        let comparator = random_policy(hh, ss, aa, &mut rng)?;
        let iterate = random_policy(hh, ss, aa, &mut rng)?;
        let qbar = QTable::from_fn(hh, ss, aa, |h, _, _| {
            rng.gen::<f64>() * (hh - h) as f64
        });
        let report = policy_difference_check(&env, &comparator, &iterate, &qbar)?;
        max_residual = max_residual.max(report.residual);
    }
    Ok(CheckReport::at_most(
        "policy-difference-identity",
        instances as usize,
        "max_residual",
        max_residual,
        1e-9,
    ))
}

/// Count-bonus optimism at the analysis scale: on random dense models the
/// estimate must upper-bound its own Bellman backup at all but a small
/// fraction of cells, and never exceed it by more than twice the bonus
/// where the lower bound holds.
pub fn optimism_tabular(options: CheckOptions) -> Result<CheckReport> {
    let (ss, aa, hh, n) = (4, 3, 3, 900);
    let seeds = 100u64;
    let alpha = default_alpha_tabular(hh, ss, aa, 1, 0.05, options.alpha_scale);
    let mut cells = 0usize;
    let mut lower_violations = 0usize;
    let mut upper_violations = 0usize;
    for seed in 0..seeds {
        let mut rng = stream(options.seed, StreamId::Aux { index: 2000 + seed });
        let env = make_random_tabular(ss, aa, hh, RewardNoise::Bernoulli, &mut rng);
        let policy = PolicyState::uniform(hh, ss, aa, 0.1)?;
        let episodes: Vec<_> = (0..n)
            .map(|_| sample_episode(&env, &policy, &mut rng))
            .collect();
        let data = split_dataset(&episodes, hh)?;
        let est = ope::ope_tabular(&policy, &data, alpha)?;
        for h in 0..hh {
            let backup = if h + 1 < hh {
                bellman_apply(&env, &policy, h, est.qbar.step(h + 1))?
            } else {
                bellman_apply(&env, &policy, h, &[])?
            };
            for (cell, target) in backup.iter().enumerate() {
                let q = est.qbar.step(h)[cell];
                let b = est.bonus.step(h)[cell];
                cells += 1;
                if q < target - 1e-9 {
                    lower_violations += 1;
                } else if q > target + 2.0 * b + 1e-9 {
                    upper_violations += 1;
                }
            }
        }
    }
    let fraction = (lower_violations + upper_violations) as f64 / cells as f64;
    let mut report = CheckReport::at_most(
        "optimism-count-bonus",
        seeds as usize,
        "violation_fraction",
        fraction,
        0.05,
    );
    report.detail = format!(
        "{lower_violations} lower / {upper_violations} upper violations over {cells} cells; {}",
        report.detail
    );
    Ok(report)
}

/// Elliptical-bonus optimism at the analysis scale on synthetic low-rank
/// models, judged against the materialized exact dynamics.
pub fn optimism_linear(options: CheckOptions) -> Result<CheckReport> {
    let (d, ss, aa, hh, n) = (4, 5, 3, 2, 2000);
    let seeds = 100u64;
    let alpha = default_alpha_linear(hh, d, 1, n, 0.05, options.alpha_scale);
    let mut cells = 0usize;
    let mut lower_violations = 0usize;
    let mut upper_violations = 0usize;
    for seed in 0..seeds {
        let mut rng = stream(options.seed, StreamId::Aux { index: 3000 + seed });
        let linear = make_random_linear(d, ss, aa, hh, RewardNoise::Bernoulli, &mut rng);
        let env = Env::from_linear(&linear)?;
        let tab = env.tabular();
        let policy = PolicyState::uniform(hh, ss, aa, 0.1)?;
        let episodes: Vec<_> = (0..n)
            .map(|_| sample_episode(tab, &policy, &mut rng))
            .collect();
        let data = split_dataset(&episodes, hh)?;
        let est = ope::ope_linear(
            &policy,
            &data,
            env.features(),
            alpha,
            1.0,
            Truncation::PerStep,
        )?;
        for h in 0..hh {
            let backup = if h + 1 < hh {
                bellman_apply(tab, &policy, h, est.qbar.step(h + 1))?
            } else {
                bellman_apply(tab, &policy, h, &[])?
            };
            for (cell, target) in backup.iter().enumerate() {
                let q = est.qbar.step(h)[cell];
                let b = est.bonus.step(h)[cell];
                cells += 1;
                if q < target - 1e-9 {
                    lower_violations += 1;
                } else if q > target + 2.0 * b + 1e-9 {
                    upper_violations += 1;
                }
            }
        }
    }
    let fraction = (lower_violations + upper_violations) as f64 / cells as f64;
    let mut report = CheckReport::at_most(
        "optimism-elliptical-bonus",
        seeds as usize,
        "violation_fraction",
        fraction,
        0.05,
    );
    report.detail = format!(
        "{lower_violations} lower / {upper_violations} upper violations over {cells} cells; {}",
        report.detail
    );
    Ok(report)
}

/// Finite-class optimism with an oracle-built realizable class on a
/// deterministic model: the Bellman image of the estimate has exactly
/// zero squared loss, so it sits in every confidence set and the
/// estimate dominates its backup at 100% of cells for any width. Also
/// verifies the estimate grows pointwise with the width.
pub fn optimism_general_realizable(options: CheckOptions) -> Result<CheckReport> {
    let (ss, aa, hh, n) = (3, 2, 3, 30);
    let seeds = 20u64;
    let mut cells = 0usize;
    let mut violations = 0usize;
    let mut monotone = true;
    for seed in 0..seeds {
        let mut rng = stream(options.seed, StreamId::Aux { index: 4000 + seed });
        // Random deterministic dynamics: one-hot rows, deterministic rewards.
        let mut transitions = vec![0.0; hh * ss * aa * ss];
        let mut rewards = vec![0.0; hh * ss * aa];
        for h in 0..hh {
            for s in 0..ss {
                for a in 0..aa {
                    let sn = rng.gen_range(0..ss);
                    transitions[((h * ss + s) * aa + a) * ss + sn] = 1.0;
                    rewards[(h * ss + s) * aa + a] = rng.gen::<f64>();
                }
            }
        }
        let env = crate::env::TabularMdp::new(
            hh,
            ss,
            aa,
            0,
            transitions,
            rewards,
            RewardNoise::Deterministic,
        )?;
        let policy = random_policy(hh, ss, aa, &mut rng)?;
        let episodes: Vec<_> = (0..n)
            .map(|_| sample_episode(&env, &policy, &mut rng))
            .collect();
        let data = split_dataset(&episodes, hh)?;
        let base_members = (0..hh)
            .map(|h| {
                let cap = (hh - h) as f64;
                vec![vec![0.0; ss * aa], vec![cap * 0.5; ss * aa]]
            })
            .collect();
        let base = FunctionClass::new(hh, ss, aa, base_members)?;
        let mut previous: Option<QTable> = None;
        for beta in [0.0, 0.25, 2.0] {
            let class = build_realizable_class(&env, &policy, &data, beta, &base)?;
            let est = ope::ope_general(&policy, &data, beta, &class)?;
            for h in 0..hh {
                let backup = if h + 1 < hh {
                    bellman_apply(&env, &policy, h, est.qbar.step(h + 1))?
                } else {
                    bellman_apply(&env, &policy, h, &[])?
                };
                for (cell, target) in backup.iter().enumerate() {
                    cells += 1;
                    if est.qbar.step(h)[cell] < target - 1e-9 {
                        violations += 1;
                    }
                }
            }
            if let Some(prev) = &previous {
                if prev
                    .data()
                    .iter()
                    .zip(est.qbar.data())
                    .any(|(lo, hi)| hi + 1e-12 < *lo)
                {
                    monotone = false;
                }
            }
            previous = Some(est.qbar);
        }
    }
    let fraction = violations as f64 / cells as f64;
    let mut report = CheckReport::at_most(
        "optimism-realizable-class",
        seeds as usize,
        "violation_fraction",
        fraction,
        0.0,
    );
    report.pass = report.pass && monotone;
    report.detail = format!(
        "{violations} violations over {cells} cells, width-monotone: {monotone}; {}",
        report.detail
    );
    Ok(report)
}

/// The evaluation-consistency identity on every iteration of a
/// 50-iteration training run: the optimistic start value minus the exact
/// policy value equals the occupancy-weighted Bellman-gap sum.
pub fn evaluation_consistency(options: CheckOptions) -> Result<CheckReport> {
    let mut rng = stream(options.seed, StreamId::Aux { index: 5000 });
    let env = Env::from_tabular(make_random_tabular(
        3,
        2,
        3,
        RewardNoise::Bernoulli,
        &mut rng,
    ))?;
    let mut config = RunConfig::new(50, 60, 5, 0.05);
    config.seed = options.seed ^ 0x5eed;
    config.alpha_scale = options.alpha_scale;
    config.record_invariants = true;
    let result = run(&config, &env)?;
    let max_residual = result
        .records
        .iter()
        .filter_map(|r| r.consistency_residual)
        .fold(0.0f64, f64::max);
    Ok(CheckReport::at_most(
        "evaluation-consistency",
        result.records.len(),
        "max_residual",
        max_residual,
        1e-9,
    ))
}

/// Between data refreshes the policy moves slowly: over a 100-iteration
/// run with `eta * m * H^2 <= 1`, the probability of every trajectory
/// under the current policy stays within a factor `e^2` of its
/// probability under the policy that collected the data in use, verified
/// by full trajectory enumeration.
pub fn policy_smoothness(options: CheckOptions) -> Result<CheckReport> {
    let mut rng = stream(options.seed, StreamId::Aux { index: 6000 });
    let env = Env::from_tabular(make_random_tabular(
        3,
        2,
        3,
        RewardNoise::Bernoulli,
        &mut rng,
    ))?;
    let m = 5usize;
    let eta = 1.0 / (m as f64 * 9.0) * 0.9;
    let mut config = RunConfig::new(100, 30, m, eta);
    config.seed = options.seed ^ 0xface;
    config.alpha_scale = options.alpha_scale;
    config.record_policies = true;
    let result = run(&config, &env)?;
    let policies = result.policies.as_ref().expect("policies recorded");
    let mut max_ratio: f64 = 0.0;
    for record in &result.records {
        let current = trajectory_distribution(env.tabular(), &policies[record.k - 1])?;
        let collector = trajectory_distribution(env.tabular(), &policies[record.t_k - 1])?;
        debug_assert_eq!(current.len(), collector.len());
        for ((path_a, p), (path_b, q)) in current.iter().zip(&collector) {
            debug_assert_eq!(path_a, path_b);
            if *p > 0.0 && *q > 0.0 {
                max_ratio = max_ratio.max(p / q).max(q / p);
            }
        }
    }
    Ok(CheckReport::at_most(
        "policy-smoothness",
        result.records.len(),
        "max_trajectory_ratio",
        max_ratio,
        std::f64::consts::E * std::f64::consts::E,
    ))
}

fn fit_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().map(|x| x.ln()).sum::<f64>() / n;
    let my = ys.iter().map(|y| y.ln()).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x.ln() - mx) * (y.ln() - my);
        var += (x.ln() - mx) * (x.ln() - mx);
    }
    cov / var
}

const DECAY_GRID: [usize; 4] = [256, 1024, 4096, 16384];

fn decay_slope(options: CheckOptions, linear: bool) -> Result<f64> {
    let mut means = Vec::with_capacity(DECAY_GRID.len());
    for (gi, &n) in DECAY_GRID.iter().enumerate() {
        let mut total = 0.0;
        let seeds = 3u64;
        for seed in 0..seeds {
            let index = 7000 + 10 * gi as u64 + seed + if linear { 500 } else { 0 };
            let mut rng = stream(options.seed, StreamId::Aux { index });
            let (env, hh) = if linear {
                let m = make_random_linear(4, 4, 2, 2, RewardNoise::Bernoulli, &mut rng);
                (Env::from_linear(&m)?, 2)
            } else {
                (
                    Env::from_tabular(make_random_tabular(
                        3,
                        2,
                        3,
                        RewardNoise::Bernoulli,
                        &mut rng,
                    ))?,
                    3,
                )
            };
            let tab = env.tabular();
            let policy = PolicyState::uniform(hh, tab.num_states, tab.num_actions, 0.1)?;
            let episodes: Vec<_> = (0..n)
                .map(|_| sample_episode(tab, &policy, &mut rng))
                .collect();
            let data = split_dataset(&episodes, hh)?;
            // A fixed unit bonus scale: only the decay rate is under test.
            let est = if linear {
                ope::ope_linear(&policy, &data, env.features(), 1.0, 1.0, Truncation::PerStep)?
            } else {
                ope::ope_tabular(&policy, &data, 1.0)?
            };
            let per_step = mean_bonus_under(&policy, &est, tab)?;
            total += per_step.iter().sum::<f64>() / per_step.len() as f64;
        }
        means.push(total / seeds as f64);
    }
    let xs: Vec<f64> = DECAY_GRID.iter().map(|&n| n as f64).collect();
    Ok(fit_log_slope(&xs, &means))
}

/// The on-policy mean count bonus decays like `N^(-1/2)` as the batch
/// grows: the log-log slope over a 64x range of batch sizes must sit
/// near -0.5.
pub fn bonus_decay_tabular(options: CheckOptions) -> Result<CheckReport> {
    let slope = decay_slope(options, false)?;
    Ok(CheckReport::in_range(
        "bonus-decay-count",
        DECAY_GRID.len(),
        "log_log_slope",
        slope,
        -0.65,
        -0.35,
    ))
}

/// Same rate for the elliptical bonus under ridge evaluation.
pub fn bonus_decay_linear(options: CheckOptions) -> Result<CheckReport> {
    let slope = decay_slope(options, true)?;
    Ok(CheckReport::in_range(
        "bonus-decay-elliptical",
        DECAY_GRID.len(),
        "log_log_slope",
        slope,
        -0.65,
        -0.35,
    ))
}
