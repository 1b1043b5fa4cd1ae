//! A small line-oriented text format for configs, environments, policy
//! snapshots, and estimate dumps.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! # comment (blank lines are skipped too)
//! key = value
//! tensor NAME dims = d1 d2 ...
//! 0.5 0.25 0.25 ...   <- exactly d1*d2*... floats, any line layout
//! ```
//!
//! Scalar values are free-form strings interpreted by typed getters.
//! Floats are written with Rust's shortest round-trip formatting and read
//! back bitwise-identically, which keeps files diff-friendly without
//! losing precision.

use crate::env::{Env, LinearMdp, RewardNoise, TabularMdp};
use crate::error::{Error, Result};
use crate::ope::{EstimateKind, Truncation, ValueEstimate};
use crate::policy::PolicyState;
use crate::tables::QTable;

/// One named tensor: dimensions plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Line the declaration appeared on, for error messages.
    pub line: usize,
}

/// A parsed document: ordered scalars and tensors with their source
/// lines. Duplicate keys are rejected at parse time; unknown-key
/// detection is the caller's job via [`Document::check_known`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    scalars: Vec<(String, String, usize)>,
    tensors: Vec<Tensor>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Document> {
        let mut doc = Document::default();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((idx, raw)) = lines.next() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("tensor ") {
                let (name, dims) = parse_tensor_header(rest, line)?;
                if doc.tensors.iter().any(|t| t.name == name) {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate tensor '{name}'"),
                    });
                }
                let want: usize = dims.iter().product();
                let mut data = Vec::with_capacity(want);
                let mut at = line;
                while data.len() < want {
                    let Some((vidx, vraw)) = lines.next() else {
                        return Err(Error::Parse {
                            line: at,
                            message: format!(
                                "tensor '{name}' ends early: got {} of {want} values",
                                data.len()
                            ),
                        });
                    };
                    at = vidx + 1;
                    let vtrim = vraw.trim();
                    if vtrim.is_empty() || vtrim.starts_with('#') {
                        continue;
                    }
                    for tok in vtrim.split_whitespace() {
                        if data.len() == want {
                            return Err(Error::Parse {
                                line: at,
                                message: format!("tensor '{name}' has more than {want} values"),
                            });
                        }
                        data.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                            line: at,
                            message: format!("tensor '{name}': '{tok}' is not a number"),
                        })?);
                    }
                }
                doc.tensors.push(Tensor {
                    name,
                    dims,
                    data,
                    line,
                });
            } else if let Some((key, value)) = trimmed.split_once('=') {
                let key = key.trim().to_string();
                let value = value.trim().to_string();
                if key.is_empty() || key.contains(char::is_whitespace) {
                    return Err(Error::Parse {
                        line,
                        message: format!("'{trimmed}' is not a valid 'key = value' line"),
                    });
                }
                if doc.scalars.iter().any(|(k, _, _)| *k == key) {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate key '{key}'"),
                    });
                }
                doc.scalars.push((key, value, line));
            } else {
                return Err(Error::Parse {
                    line,
                    message: format!("cannot parse '{trimmed}'"),
                });
            }
        }
        Ok(doc)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.scalars
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing required key '{key}'"),
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.scalars.iter().find(|(k, _, _)| k == key) {
            None => Ok(None),
            Some((_, v, line)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: *line,
                message: format!("key '{key}': cannot parse '{v}'"),
            }),
        }
    }

    pub fn require_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get_parsed(key)?.ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing required key '{key}'"),
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get_str(key) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(v) => Err(Error::Parse {
                line: self.line_of(key),
                message: format!("key '{key}': expected a boolean, got '{v}'"),
            }),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require_tensor(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.tensor(name).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing required tensor '{name}'"),
        })?;
        if t.dims != dims {
            return Err(Error::Parse {
                line: t.line,
                message: format!(
                    "tensor '{name}': expected dims {dims:?}, got {:?}",
                    t.dims
                ),
            });
        }
        Ok(t)
    }

    pub fn scalar_keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.scalars.iter().map(|(k, _, l)| (k.as_str(), *l))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = (&str, usize)> {
        self.tensors.iter().map(|t| (t.name.as_str(), t.line))
    }

    /// Rejects any key or tensor outside the allowlists, naming the first
    /// offender and its line.
    pub fn check_known(&self, scalar_keys: &[&str], tensor_names: &[&str]) -> Result<()> {
        for (k, line) in self.scalar_keys() {
            if !scalar_keys.contains(&k) {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key '{k}'"),
                });
            }
        }
        for (n, line) in self.tensor_names() {
            if !tensor_names.contains(&n) {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown tensor '{n}'"),
                });
            }
        }
        Ok(())
    }

    fn line_of(&self, key: &str) -> usize {
        self.scalars
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, l)| *l)
            .unwrap_or(0)
    }
}

fn parse_tensor_header(rest: &str, line: usize) -> Result<(String, Vec<usize>)> {
    let bad = || Error::Parse {
        line,
        message: "tensor header must read 'tensor NAME dims = d1 d2 ...'".to_string(),
    };
    let (name, dims_part) = rest.split_once(" dims").ok_or_else(bad)?;
    let name = name.trim();
    let dims_part = dims_part.trim_start();
    let dims_str = dims_part.strip_prefix('=').ok_or_else(bad)?;
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(bad());
    }
    let dims: Vec<usize> = dims_str
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::Parse {
            line,
            message: format!("tensor '{name}': dims must be positive integers"),
        });
    }
    let cells: usize = dims.iter().product();
    if cells > 50_000_000 {
        return Err(Error::Parse {
            line,
            message: format!("tensor '{name}' would hold {cells} values; refusing"),
        });
    }
    Ok((name.to_string(), dims))
}

fn push_tensor(out: &mut String, name: &str, dims: &[usize], data: &[f64]) {
    use std::fmt::Write;
    let _ = write!(out, "tensor {name} dims =");
    for d in dims {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    // Row-major data, last dimension per line.
    let width = *dims.last().unwrap_or(&1);
    for row in data.chunks(width.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
}

fn noise_name(n: RewardNoise) -> &'static str {
    match n {
        RewardNoise::Deterministic => "deterministic",
        RewardNoise::Bernoulli => "bernoulli",
    }
}

pub fn parse_noise(s: &str) -> Result<RewardNoise> {
    match s {
        "deterministic" => Ok(RewardNoise::Deterministic),
        "bernoulli" => Ok(RewardNoise::Bernoulli),
        other => Err(Error::Parse {
            line: 0,
            message: format!(
                "reward_noise must be 'deterministic' or 'bernoulli', got '{other}'"
            ),
        }),
    }
}

pub const TABULAR_ENV_KEYS: &[&str] = &[
    "kind",
    "states",
    "actions",
    "horizon",
    "start_state",
    "reward_noise",
];
pub const TABULAR_ENV_TENSORS: &[&str] = &["transitions", "rewards"];
pub const LINEAR_ENV_KEYS: &[&str] = &[
    "kind",
    "states",
    "actions",
    "horizon",
    "dim",
    "start_state",
    "reward_noise",
];
pub const LINEAR_ENV_TENSORS: &[&str] = &["features", "successors", "reward_weights"];

/// Serializes a tabular model.
pub fn write_tabular(m: &TabularMdp) -> String {
    let mut out = String::new();
    out.push_str("kind = tabular\n");
    out.push_str(&format!("states = {}\n", m.num_states));
    out.push_str(&format!("actions = {}\n", m.num_actions));
    out.push_str(&format!("horizon = {}\n", m.horizon));
    out.push_str(&format!("start_state = {}\n", m.start_state));
    out.push_str(&format!("reward_noise = {}\n", noise_name(m.reward_noise)));
    push_tensor(
        &mut out,
        "transitions",
        &[m.horizon, m.num_states, m.num_actions, m.num_states],
        &m.transitions,
    );
    push_tensor(
        &mut out,
        "rewards",
        &[m.horizon, m.num_states, m.num_actions],
        &m.rewards,
    );
    out
}

/// Serializes a low-rank model.
pub fn write_linear(m: &LinearMdp) -> String {
    let mut out = String::new();
    out.push_str("kind = linear\n");
    out.push_str(&format!("states = {}\n", m.num_states));
    out.push_str(&format!("actions = {}\n", m.num_actions));
    out.push_str(&format!("horizon = {}\n", m.horizon));
    out.push_str(&format!("dim = {}\n", m.dim));
    out.push_str(&format!("start_state = {}\n", m.start_state));
    out.push_str(&format!("reward_noise = {}\n", noise_name(m.reward_noise)));
    push_tensor(
        &mut out,
        "features",
        &[m.horizon, m.num_states, m.num_actions, m.dim],
        &m.features,
    );
    push_tensor(
        &mut out,
        "successors",
        &[m.horizon, m.num_states, m.dim],
        &m.successor,
    );
    push_tensor(
        &mut out,
        "reward_weights",
        &[m.horizon, m.dim],
        &m.reward_weights,
    );
    out
}

/// Serializes either environment kind.
pub fn write_env(env: &Env) -> String {
    write_tabular(env.tabular())
}

/// Parses an environment from an already-parsed document. The document
/// may contain extra keys (e.g. a run config carrying an inline
/// environment); strict unknown-key checking is the caller's concern.
pub fn env_from_document(doc: &Document) -> Result<Env> {
    let kind = doc.require_str("kind")?;
    let ss: usize = doc.require_parsed("states")?;
    let aa: usize = doc.require_parsed("actions")?;
    let hh: usize = doc.require_parsed("horizon")?;
    let start: usize = doc.get_parsed("start_state")?.unwrap_or(0);
    let noise = match doc.get_str("reward_noise") {
        Some(s) => parse_noise(s)?,
        None => RewardNoise::Deterministic,
    };
    match kind {
        "tabular" => {
            let p = doc.require_tensor("transitions", &[hh, ss, aa, ss])?;
            let r = doc.require_tensor("rewards", &[hh, ss, aa])?;
            let m = TabularMdp::new(hh, ss, aa, start, p.data.clone(), r.data.clone(), noise)?;
            Env::from_tabular(m)
        }
        "linear" => {
            let d: usize = doc.require_parsed("dim")?;
            let phi = doc.require_tensor("features", &[hh, ss, aa, d])?;
            let psi = doc.require_tensor("successors", &[hh, ss, d])?;
            let w = doc.require_tensor("reward_weights", &[hh, d])?;
            let m = LinearMdp::new(
                hh,
                ss,
                aa,
                d,
                start,
                phi.data.clone(),
                psi.data.clone(),
                w.data.clone(),
                noise,
            )?;
            Env::from_linear(&m)
        }
        other => Err(Error::Parse {
            line: 0,
            message: format!("kind must be 'tabular' or 'linear', got '{other}'"),
        }),
    }
}

/// Parses an environment file, rejecting unknown keys.
pub fn parse_env(text: &str) -> Result<Env> {
    let doc = Document::parse(text)?;
    match doc.get_str("kind") {
        Some("linear") => doc.check_known(LINEAR_ENV_KEYS, LINEAR_ENV_TENSORS)?,
        _ => doc.check_known(TABULAR_ENV_KEYS, TABULAR_ENV_TENSORS)?,
    }
    env_from_document(&doc)
}

/// Serializes a policy snapshot.
pub fn write_policy(p: &PolicyState) -> String {
    let logits = p.logits();
    let mut out = String::new();
    out.push_str("kind = policy\n");
    out.push_str(&format!("states = {}\n", logits.num_states));
    out.push_str(&format!("actions = {}\n", logits.num_actions));
    out.push_str(&format!("horizon = {}\n", logits.horizon));
    out.push_str(&format!("eta = {}\n", p.eta()));
    out.push_str(&format!("iteration = {}\n", p.iteration()));
    push_tensor(
        &mut out,
        "logits",
        &[logits.horizon, logits.num_states, logits.num_actions],
        logits.data(),
    );
    out
}

/// Parses a policy snapshot written by [`write_policy`].
pub fn parse_policy(text: &str) -> Result<PolicyState> {
    let doc = Document::parse(text)?;
    doc.check_known(
        &["kind", "states", "actions", "horizon", "eta", "iteration"],
        &["logits"],
    )?;
    if doc.require_str("kind")? != "policy" {
        return Err(Error::Parse {
            line: 0,
            message: "kind must be 'policy'".into(),
        });
    }
    let ss: usize = doc.require_parsed("states")?;
    let aa: usize = doc.require_parsed("actions")?;
    let hh: usize = doc.require_parsed("horizon")?;
    let eta: f64 = doc.require_parsed("eta")?;
    let iteration: usize = doc.require_parsed("iteration")?;
    let t = doc.require_tensor("logits", &[hh, ss, aa])?;
    let mut logits = QTable::zeros(hh, ss, aa);
    for h in 0..hh {
        logits.set_step(h, &t.data[h * ss * aa..(h + 1) * ss * aa]);
    }
    PolicyState::from_parts(eta, iteration, logits)
}

/// Dumps an estimate for offline inspection (write-only; estimates are
/// derived artifacts and never read back).
pub fn write_estimate(est: &ValueEstimate) -> String {
    let q = &est.qbar;
    let (hh, ss, aa) = (q.horizon, q.num_states, q.num_actions);
    let mut out = String::new();
    out.push_str("kind = estimate\n");
    out.push_str(&format!("states = {ss}\n"));
    out.push_str(&format!("actions = {aa}\n"));
    out.push_str(&format!("horizon = {hh}\n"));
    match &est.kind {
        EstimateKind::Tabular { alpha, counts, .. } => {
            out.push_str("evaluator = tabular\n");
            out.push_str(&format!("alpha = {alpha}\n"));
            let counts_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            push_tensor(&mut out, "counts", &[hh, ss, aa], &counts_f);
        }
        EstimateKind::Linear {
            alpha,
            lambda,
            theta,
            truncation,
            ..
        } => {
            out.push_str("evaluator = ridge\n");
            out.push_str(&format!("alpha = {alpha}\n"));
            out.push_str(&format!("lambda = {lambda}\n"));
            out.push_str(&format!(
                "truncation = {}\n",
                match truncation {
                    Truncation::PerStep => "per_step",
                    Truncation::FullHorizon => "full_horizon",
                }
            ));
            let d = theta.first().map_or(0, Vec::len);
            let flat: Vec<f64> = theta.iter().flatten().copied().collect();
            if d > 0 {
                push_tensor(&mut out, "theta", &[hh, d], &flat);
            }
        }
        EstimateKind::General {
            beta,
            confidence_sets,
            class_sizes,
        } => {
            out.push_str("evaluator = finite_class\n");
            out.push_str(&format!("beta = {beta}\n"));
            let sizes: Vec<f64> = class_sizes.iter().map(|&c| c as f64).collect();
            push_tensor(&mut out, "class_sizes", &[hh], &sizes);
            let kept: Vec<f64> = confidence_sets.iter().map(|s| s.len() as f64).collect();
            push_tensor(&mut out, "confidence_set_sizes", &[hh], &kept);
        }
    }
    push_tensor(&mut out, "qbar", &[hh, ss, aa], q.data());
    push_tensor(&mut out, "vbar", &[hh, ss], est.vbar.data());
    push_tensor(&mut out, "bonus", &[hh, ss, aa], est.bonus.data());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_random_linear;
    use crate::env::make_random_tabular;
    use crate::ope::{ope_tabular, split_dataset};
    use crate::rng::{stream, StreamId};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn document_parses_scalars_comments_and_tensors() {
        let text = "\
# a comment
kind = tabular

alpha = 0.5
tensor q dims = 2 2
1 2
# interior comment
3 4.5
done = yes
";
        let doc = Document::parse(text).unwrap();
        assert_eq!(doc.get_str("kind"), Some("tabular"));
        assert_eq!(doc.require_parsed::<f64>("alpha").unwrap(), 0.5);
        assert_eq!(doc.get_bool("done").unwrap(), Some(true));
        let t = doc.require_tensor("q", &[2, 2]).unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.5]);
        assert_eq!(t.line, 5);
    }

    #[test]
    fn document_rejects_malformed_input() {
        for (text, needle) in [
            ("just words\n", "cannot parse"),
            ("a = 1\na = 2\n", "duplicate key"),
            ("tensor q dims = 2\n1\n", "ends early"),
            ("tensor q dims = 2\n1 2 3\n", "more than"),
            ("tensor q dims = 2\n1 x\n", "not a number"),
            ("tensor q dims = 0\n", "positive"),
            ("tensor q dims 2\n", "tensor header"),
            ("bad key = 1\n", "not a valid"),
        ] {
            let err = Document::parse(text).unwrap_err().to_string();
            assert!(
                err.contains(needle),
                "'{text}' should fail with '{needle}', got '{err}'"
            );
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let doc = Document::parse("kind = tabular\nbogus = 1\n").unwrap();
        let err = doc
            .check_known(&["kind"], &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn tabular_env_round_trips_bitwise() {
        let mut rng = stream(11, StreamId::EnvGen { index: 0 });
        let m = make_random_tabular(4, 3, 3, crate::env::RewardNoise::Bernoulli, &mut rng);
        let text = write_tabular(&m);
        let env = parse_env(&text).unwrap();
        assert_eq!(env.tabular(), &m);
        assert!(!env.is_linear());
    }

    #[test]
    fn linear_env_round_trips_bitwise() {
        let mut rng = stream(12, StreamId::EnvGen { index: 1 });
        let m = make_random_linear(4, 2, 2, 3, crate::env::RewardNoise::Deterministic, &mut rng);
        let text = write_linear(&m);
        let env = parse_env(&text).unwrap();
        assert!(env.is_linear());
        let direct = Env::from_linear(&m).unwrap();
        assert_eq!(&direct, &env);
    }

    #[test]
    fn env_parse_rejects_bad_documents() {
        let mut rng = stream(13, StreamId::EnvGen { index: 2 });
        let m = make_random_tabular(2, 2, 2, crate::env::RewardNoise::Deterministic, &mut rng);
        let good = write_tabular(&m);

        let bad = good.replace("kind = tabular", "kind = typo");
        assert!(parse_env(&bad).is_err());
        let bad = good.replace("reward_noise = deterministic", "reward_noise = maybe");
        assert!(parse_env(&bad).is_err());
        let bad = format!("{good}extra = 1\n");
        let err = parse_env(&bad).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
        // An invalid transition row is a model error, not a parse error.
        let bad = good.replacen("0.", "9.", 1);
        assert!(parse_env(&bad).is_err());
    }

    #[test]
    fn policy_round_trips_bitwise() {
        let mut q = QTable::zeros(2, 2, 2);
        for h in 0..2 {
            for s in 0..2 {
                for a in 0..2 {
                    q.set(h, s, a, (h + s) as f64 * 0.31 + a as f64 * 0.07);
                }
            }
        }
        let p = PolicyState::uniform(2, 2, 2, 0.25)
            .unwrap()
            .mirror_ascent_step(&q)
            .unwrap();
        let restored = parse_policy(&write_policy(&p)).unwrap();
        assert_eq!(p, restored);
    }

    #[test]
    fn estimate_dump_lists_all_tables() {
        let mut rng = stream(14, StreamId::EnvGen { index: 3 });
        let env = make_random_tabular(3, 2, 2, crate::env::RewardNoise::Deterministic, &mut rng);
        let policy = PolicyState::uniform(2, 3, 2, 0.1).unwrap();
        let episodes: Vec<_> = (0..10)
            .map(|_| crate::env::sample_episode(&env, &policy, &mut rng))
            .collect();
        let data = split_dataset(&episodes, 2).unwrap();
        let est = ope_tabular(&policy, &data, 1.0).unwrap();
        let dump = write_estimate(&est);
        for needle in ["evaluator = tabular", "tensor qbar", "tensor vbar", "tensor bonus", "tensor counts"] {
            assert!(dump.contains(needle), "missing '{needle}'");
        }
        // The dump itself is a valid document.
        Document::parse(&dump).unwrap();
    }

    proptest! {
        #[test]
        fn floats_round_trip_bitwise(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let text = format!("x = {v}\ntensor t dims = 1\n{v}\n");
            let doc = Document::parse(&text).unwrap();
            prop_assert_eq!(doc.require_parsed::<f64>("x").unwrap().to_bits(), v.to_bits());
            prop_assert_eq!(doc.tensor("t").unwrap().data[0].to_bits(), v.to_bits());
        }

        #[test]
        fn random_tabular_documents_round_trip(seed in 0u64..200) {
            let mut rng = stream(seed, StreamId::EnvGen { index: 9 });
            let ss = rng.gen_range(1..4);
            let aa = rng.gen_range(1..4);
            let hh = rng.gen_range(1..4);
            let m = make_random_tabular(ss, aa, hh, crate::env::RewardNoise::Deterministic, &mut rng);
            let env = parse_env(&write_tabular(&m)).unwrap();
            prop_assert_eq!(env.tabular(), &m);
        }
    }
}
