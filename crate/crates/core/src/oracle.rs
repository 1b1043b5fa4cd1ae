//! Exact dynamic-programming oracles.
//!
//! Everything here is computed by full backward or forward recursions on
//! the tabular model, with no sampling, so these routines serve as the
//! independent reference for every estimator and every invariant check in
//! the crate. All recursions traverse states and actions in fixed index
//! order; results are deterministic to the bit.

use crate::env::TabularMdp;
use crate::error::{Error, Result};
use crate::policy::{DeterministicPolicy, StochasticPolicy};
use crate::tables::{QTable, VTable};

/// Exact action and state values per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub q: QTable,
    pub v: VTable,
}

/// Both sides of the policy-difference identity and their gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Optimal values by backward induction, plus the greedy policy.
/// Ties break toward the lowest action index.
pub fn value_iteration(env: &TabularMdp) -> (ValueTable, DeterministicPolicy) {
    let (hh, ss, aa) = (env.horizon, env.num_states, env.num_actions);
    let mut q = QTable::zeros(hh, ss, aa);
    let mut v = VTable::zeros(hh, ss);
    let mut actions = vec![0usize; hh * ss];
    for h in (0..hh).rev() {
        for s in 0..ss {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..aa {
                let mut val = env.r(h, s, a);
                if h + 1 < hh {
                    let row = env.p(h, s, a);
                    for sn in 0..ss {
                        val += row[sn] * v.get(h + 1, sn);
                    }
                }
                q.set(h, s, a, val);
                if val > best {
                    best = val;
                    best_a = a;
                }
            }
            v.set(h, s, best);
            actions[h * ss + s] = best_a;
        }
    }
    (
        ValueTable { q, v },
        DeterministicPolicy {
            horizon: hh,
            num_states: ss,
            num_actions: aa,
            actions,
        },
    )
}

/// Exact evaluation of an arbitrary policy by backward induction.
pub fn policy_eval_exact(env: &TabularMdp, policy: &impl StochasticPolicy) -> Result<ValueTable> {
    check_policy_shape("policy_eval_exact", env, policy)?;
    let (hh, ss, aa) = (env.horizon, env.num_states, env.num_actions);
    let mut q = QTable::zeros(hh, ss, aa);
    let mut v = VTable::zeros(hh, ss);
    for h in (0..hh).rev() {
        for s in 0..ss {
            for a in 0..aa {
                let mut val = env.r(h, s, a);
                if h + 1 < hh {
                    let row = env.p(h, s, a);
                    for sn in 0..ss {
                        val += row[sn] * v.get(h + 1, sn);
                    }
                }
                q.set(h, s, a, val);
            }
            let probs = policy.probs(h, s);
            let ev = probs
                .iter()
                .zip(q.row(h, s))
                .map(|(p, qa)| p * qa)
                .sum::<f64>();
            v.set(h, s, ev);
        }
    }
    Ok(ValueTable { q, v })
}

///// One application of the policy Bellman operator at step `h`:
/// `R_h(s,a) + E_{s' ~ P_h(.|s,a)} E_{a' ~ policy_{h+1}(.|s')} [q_next(s',a')]`.
///
/// `q_next` is the flat `[s][a]` table for step `h + 1`; it is ignored at
/// the final step, where the operator reduces to the reward table.
pub fn bellman_apply(
    env: &TabularMdp,
    policy: &impl StochasticPolicy,
    h: usize,
    q_next: &[f64],
) -> Result<Vec<f64>> {
    check_policy_shape("bellman_apply", env, policy)?;
    let (hh, ss, aa) = (env.horizon, env.num_states, env.num_actions);
    if h >= hh {
        return Err(Error::Invalid(format!("step {h} out of range for H={hh}")));
    }
    let mut out = vec![0.0; ss * aa];
    if h + 1 == hh {
        for s in 0..ss {
            for a in 0..aa {
                out[s * aa + a] = env.r(h, s, a);
            }
        }
        return Ok(out);
    }
    if q_next.len() != ss * aa {
        return Err(Error::Dimension {
            context: "bellman_apply q_next",
            expected: ss * aa,
            got: q_next.len(),
        });
    }
    // Policy-average q_next once per next state, then push through P.
    let mut v_next = vec![0.0; ss];
    for (sn, v) in v_next.iter_mut().enumerate() {
        let probs = policy.probs(h + 1, sn);
        *v = probs
            .iter()
            .zip(&q_next[sn * aa..(sn + 1) * aa])
            .map(|(p, q)| p * q)
            .sum();
    }
    for s in 0..ss {
        for a in 0..aa {
            let row = env.p(h, s, a);
            let mut val = env.r(h, s, a);
            for sn in 0..ss {
                val += row[sn] * v_next[sn];
            }
            out[s * aa + a] = val;
        }
    }
    Ok(out)
}

/// State-visitation probabilities per step under `policy`, by forward
/// recursion from the start state.
pub fn occupancy(env: &TabularMdp, policy: &impl StochasticPolicy) -> Result<VTable> {
    check_policy_shape("occupancy", env, policy)?;
    let (hh, ss, aa) = (env.horizon, env.num_states, env.num_actions);
    let mut d = VTable::zeros(hh, ss);
    d.set(0, env.start_state, 1.0);
    for h in 0..hh.saturating_sub(1) {
        let mut next = vec![0.0; ss];
        for s in 0..ss {
            let mass = d.get(h, s);
            if mass == 0.0 {
                continue;
            }
            let probs = policy.probs(h, s);
            for a in 0..aa {
                let w = mass * probs[a];
                if w == 0.0 {
                    continue;
                }
                let row = env.p(h, s, a);
                for sn in 0..ss {
                    next[sn] += w * row[sn];
                }
            }
        }
        for (sn, &mass) in next.iter().enumerate() {
            d.set(h + 1, sn, mass);
        }
    }
    Ok(d)
}

/// Enumerates every trajectory `(s_1, a_1, ..., s_H, a_H)` with positive
/// probability under `policy`, in depth-first order over action and next-
/// state indices, together with its probability.
///
/// Fails if `(S * A)^H` exceeds 10^6.
pub fn trajectory_distribution(
    env: &TabularMdp,
    policy: &impl StochasticPolicy,
) -> Result<Vec<(Vec<(usize, usize)>, f64)>> {
    check_policy_shape("trajectory_distribution", env, policy)?;
    let size = ((env.num_states * env.num_actions) as f64).powi(env.horizon as i32);
    if size > 1e6 {
        return Err(Error::TooLarge { size, limit: 1e6 });
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(env.horizon);
    walk(env, policy, 0, env.start_state, 1.0, &mut prefix, &mut out);
    Ok(out)
}

fn walk(
    env: &TabularMdp,
    policy: &impl StochasticPolicy,
    h: usize,
    s: usize,
    prob: f64,
    prefix: &mut Vec<(usize, usize)>,
    out: &mut Vec<(Vec<(usize, usize)>, f64)>,
) {
    let probs = policy.probs(h, s);
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        prefix.push((s, a));
        let p = prob * pa;
        if h + 1 == env.horizon {
            out.push((prefix.clone(), p));
        } else {
            let row = env.p(h, s, a);
            for (sn, &pt) in row.iter().enumerate() {
                if pt > 0.0 {
                    walk(env, policy, h + 1, sn, p * pt, prefix, out);
                }
            }
        }
        prefix.pop();
    }
}

/// Evaluates both sides of the policy-difference identity for a
/// comparator policy `pi`, an iterate `pik`, and the iterate's optimistic
/// action-value tables `qbar`:
///
/// `V^pi_1(s1) - Vbar_1(s1)`
/// `  = sum_h E_{s_h ~ pi} <pi_h(.|s_h) - pik_h(.|s_h), qbar_h(s_h, .)>`
/// `  + sum_h E_{(s_h,a_h) ~ pi} [(T^pik_h qbar_{h+1}) - qbar_h](s_h, a_h)`
///
/// where `Vbar_h(s) = E_{a ~ pik_h(.|s)} [qbar_h(s, a)]` and `T^pik_h` is
/// the exact Bellman operator of the iterate. The identity holds for any
/// table `qbar`; the report's residual is float error only.
pub fn policy_difference_check(
    env: &TabularMdp,
    comparator: &impl StochasticPolicy,
    iterate: &impl StochasticPolicy,
    qbar: &QTable,
) -> Result<DiffReport> {
    check_policy_shape("policy_difference_check", env, comparator)?;
    check_policy_shape("policy_difference_check", env, iterate)?;
    if qbar.horizon != env.horizon
        || qbar.num_states != env.num_states
        || qbar.num_actions != env.num_actions
    {
        return Err(Error::Invalid(
            "policy_difference_check: qbar shape does not match the model".into(),
        ));
    }
    let (hh, ss, aa) = (env.horizon, env.num_states, env.num_actions);
    let s1 = env.start_state;

    let v_pi = policy_eval_exact(env, comparator)?;
    let vbar_1: f64 = iterate
        .probs(0, s1)
        .iter()
        .zip(qbar.row(0, s1))
        .map(|(p, q)| p * q)
        .sum();
    let lhs = v_pi.v.get(0, s1) - vbar_1;

    let occ = occupancy(env, comparator)?;
    let mut mismatch_term = 0.0; // sum_h E_pi <pi - pik, qbar>
    let mut bellman_term = 0.0; // sum_h E_pi [T^pik qbar_{h+1} - qbar]
    for h in 0..hh {
        let t_next = if h + 1 < hh {
            bellman_apply(env, iterate, h, qbar.step(h + 1))?
        } else {
            bellman_apply(env, iterate, h, &[])?
        };
        for s in 0..ss {
            let mass = occ.get(h, s);
            if mass == 0.0 {
                continue;
            }
            let pi_probs = comparator.probs(h, s);
            let pik_probs = iterate.probs(h, s);
            for a in 0..aa {
                let q = qbar.get(h, s, a);
                mismatch_term += mass * (pi_probs[a] - pik_probs[a]) * q;
                bellman_term += mass * pi_probs[a] * (t_next[s * aa + a] - q);
            }
        }
    }
    let rhs = mismatch_term + bellman_term;
    Ok(DiffReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

fn check_policy_shape(
    context: &'static str,
    env: &TabularMdp,
    policy: &impl StochasticPolicy,
) -> Result<()> {
    if policy.horizon() != env.horizon {
        return Err(Error::Dimension {
            context,
            expected: env.horizon,
            got: policy.horizon(),
        });
    }
    if policy.num_states() != env.num_states {
        return Err(Error::Dimension {
            context,
            expected: env.num_states,
            got: policy.num_states(),
        });
    }
    if policy.num_actions() != env.num_actions {
        return Err(Error::Dimension {
            context,
            expected: env.num_actions,
            got: policy.num_actions(),
        });
    }
    Ok(())
}
