//! Experiment-file loading: flat key-value text (plus optional inline
//! environment tensors) resolved into a ready-to-run experiment.

use onpg_core::driver::{OpeKind, RunConfig};
use onpg_core::env::{make_random_linear, make_random_tabular, Env, RewardNoise};
use onpg_core::ope::Truncation;
use onpg_core::rng::{stream, StreamId};
use onpg_core::textfmt::{self, Document};
use onpg_core::{Error, Result};
use std::path::{Path, PathBuf};

/// Which config key a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    BatchSize,
    Iterations,
    AlphaScale,
    UpdatePeriod,
}

impl SweepAxis {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SweepAxis::None),
            "batch_size" | "N" => Ok(SweepAxis::BatchSize),
            "iterations" | "K" => Ok(SweepAxis::Iterations),
            "alpha" | "alpha_scale" => Ok(SweepAxis::AlphaScale),
            "update_period" | "m" => Ok(SweepAxis::UpdatePeriod),
            other => Err(Error::Config(format!(
                "key 'sweep_axis': expected none, batch_size, iterations, alpha, or update_period, got '{other}'"
            ))),
        }
    }

    /// Applies one grid value to a config. Integer axes insist the value
    /// is a positive integer.
    pub fn apply(self, value: f64, config: &mut RunConfig) -> Result<()> {
        let as_count = |what: &str| -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 || value > 1e12 {
                return Err(Error::Config(format!(
                    "key 'sweep_grid': {what} needs positive integers, got {value}"
                )));
            }
            Ok(value as usize)
        };
        match self {
            SweepAxis::None => Err(Error::Config(
                "key 'sweep_axis': the sweep command needs an axis other than 'none'".into(),
            )),
            SweepAxis::BatchSize => {
                config.batch_size = as_count("batch_size")?;
                Ok(())
            }
            SweepAxis::Iterations => {
                config.iterations = as_count("iterations")?;
                Ok(())
            }
            SweepAxis::UpdatePeriod => {
                config.update_period = as_count("update_period")?;
                Ok(())
            }
            SweepAxis::AlphaScale => {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(Error::Config(format!(
                        "key 'sweep_grid': alpha values must be >= 0, got {value}"
                    )));
                }
                config.alpha_scale = value;
                Ok(())
            }
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ope: Option<OpeKind>,
    pub alpha_scale: Option<f64>,
}

/// A fully resolved experiment: the environment, a template run config
/// (holding the base seed), and harness settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: Env,
    pub run: RunConfig,
    pub num_seeds: usize,
    pub sweep_axis: SweepAxis,
    pub sweep_grid: Vec<f64>,
    pub out: Option<PathBuf>,
}

const BASE_KEYS: &[&str] = &[
    "env_source",
    "env_path",
    "gen_kind",
    "gen_seed",
    "gen_states",
    "gen_actions",
    "gen_horizon",
    "gen_dim",
    "reward_noise",
    "iterations",
    "batch_size",
    "update_period",
    "eta",
    "alpha_scale",
    "lambda",
    "beta",
    "delta",
    "truncation",
    "ope",
    "seed",
    "num_seeds",
    "record_invariants",
    "sweep_axis",
    "sweep_grid",
    "out",
];

fn parse_ope(s: &str) -> Result<OpeKind> {
    match s {
        "tabular" => Ok(OpeKind::Tabular),
        "linear" => Ok(OpeKind::Linear),
        "general" => Ok(OpeKind::General),
        other => Err(Error::Config(format!(
            "key 'ope': expected tabular, linear, or general, got '{other}'"
        ))),
    }
}

fn parse_truncation(s: &str) -> Result<Truncation> {
    match s {
        "per_step" => Ok(Truncation::PerStep),
        "full_horizon" => Ok(Truncation::FullHorizon),
        other => Err(Error::Config(format!(
            "key 'truncation': expected per_step or full_horizon, got '{other}'"
        ))),
    }
}

/// Builds the environment named by `env_source`.
fn load_env(doc: &Document, config_dir: &Path) -> Result<Env> {
    let source = doc.get_str("env_source").unwrap_or("generator");
    match source {
        "generator" => {
            let kind = doc.get_str("gen_kind").unwrap_or("tabular");
            let seed: u64 = doc.get_parsed("gen_seed")?.unwrap_or(0);
            let ss: usize = require_positive(doc, "gen_states")?;
            let aa: usize = require_positive(doc, "gen_actions")?;
            let hh: usize = require_positive(doc, "gen_horizon")?;
            let noise = match doc.get_str("reward_noise") {
                Some(s) => textfmt::parse_noise(s)?,
                None => RewardNoise::Deterministic,
            };
            let mut rng = stream(seed, StreamId::EnvGen { index: 0 });
            match kind {
                "tabular" => {
                    Env::from_tabular(make_random_tabular(ss, aa, hh, noise, &mut rng))
                }
                "linear" => {
                    let d: usize = require_positive(doc, "gen_dim")?;
                    Env::from_linear(&make_random_linear(d, ss, aa, hh, noise, &mut rng))
                }
                other => Err(Error::Config(format!(
                    "key 'gen_kind': expected tabular or linear, got '{other}'"
                ))),
            }
        }
        "file" => {
            let rel = doc.require_str("env_path")?;
            let path = config_dir.join(rel);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!("key 'env_path': cannot read {}: {e}", path.display()))
            })?;
            textfmt::parse_env(&text)
        }
        "inline" => textfmt::env_from_document(doc),
        other => Err(Error::Config(format!(
            "key 'env_source': expected generator, file, or inline, got '{other}'"
        ))),
    }
}

fn require_positive(doc: &Document, key: &str) -> Result<usize> {
    let v: usize = doc.require_parsed(key)?;
    if v == 0 {
        return Err(Error::Config(format!("key '{key}': must be >= 1")));
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Parses config text. `for_sweep` demands a sweep axis and grid;
    /// otherwise the axis must be absent or `none`.
    pub fn load(text: &str, config_dir: &Path, overrides: &Overrides, for_sweep: bool) -> Result<ExperimentConfig> {
        let doc = Document::parse(text)?;
        let inline = doc.get_str("env_source") == Some("inline");
        let mut keys: Vec<&str> = BASE_KEYS.to_vec();
        let mut tensors: Vec<&str> = Vec::new();
        if inline {
            for k in textfmt::TABULAR_ENV_KEYS
                .iter()
                .chain(textfmt::LINEAR_ENV_KEYS)
            {
                if !keys.contains(k) {
                    keys.push(k);
                }
            }
            tensors.extend_from_slice(textfmt::TABULAR_ENV_TENSORS);
            tensors.extend_from_slice(textfmt::LINEAR_ENV_TENSORS);
        }
        doc.check_known(&keys, &tensors)?;

        let env = load_env(&doc, config_dir)?;
        let horizon = env.tabular().horizon;

        let iterations: usize = doc.require_parsed("iterations")?;
        let batch_size: usize = doc.require_parsed("batch_size")?;
        let update_period: usize = doc.get_parsed("update_period")?.unwrap_or(1);
        let eta: f64 = doc.require_parsed("eta")?;
        let mut run = RunConfig::new(iterations, batch_size, update_period, eta);
        if let Some(v) = doc.get_parsed::<f64>("alpha_scale")? {
            run.alpha_scale = v;
        }
        if let Some(v) = doc.get_parsed::<f64>("lambda")? {
            run.lambda = v;
        }
        if let Some(v) = doc.get_parsed::<f64>("beta")? {
            run.beta = Some(v);
        }
        if let Some(v) = doc.get_parsed::<f64>("delta")? {
            run.delta = v;
        }
        if let Some(s) = doc.get_str("truncation") {
            run.truncation = parse_truncation(s)?;
        }
        if let Some(s) = doc.get_str("ope") {
            run.ope = parse_ope(s)?;
        }
        if let Some(v) = doc.get_parsed::<u64>("seed")? {
            run.seed = v;
        }
        if let Some(v) = doc.get_bool("record_invariants")? {
            run.record_invariants = v;
        }

        if let Some(seed) = overrides.seed {
            run.seed = seed;
        }
        if let Some(ope) = overrides.ope {
            run.ope = ope;
        }
        if let Some(scale) = overrides.alpha_scale {
            run.alpha_scale = scale;
        }

        let num_seeds: usize = doc.get_parsed("num_seeds")?.unwrap_or(1);
        if num_seeds == 0 {
            return Err(Error::Config("key 'num_seeds': must be >= 1".into()));
        }

        let sweep_axis = match doc.get_str("sweep_axis") {
            Some(s) => SweepAxis::parse(s)?,
            None => SweepAxis::None,
        };
        let sweep_grid = match doc.get_str("sweep_grid") {
            Some(s) => parse_grid(s)?,
            None => Vec::new(),
        };
        if for_sweep {
            if sweep_axis == SweepAxis::None {
                return Err(Error::Config(
                    "key 'sweep_axis': the sweep command needs an axis other than 'none'".into(),
                ));
            }
            if sweep_grid.is_empty() {
                return Err(Error::Config(
                    "key 'sweep_grid': the sweep command needs a nonempty grid".into(),
                ));
            }
        } else if sweep_axis != SweepAxis::None {
            return Err(Error::Config(
                "key 'sweep_axis': set to none (or remove it) for single runs; use the sweep command".into(),
            ));
        }

        let out = overrides
            .out
            .clone()
            .or_else(|| doc.get_str("out").map(|s| config_dir.join(s)));

        // Validate the template eagerly so bad values fail before any work.
        run.validate(horizon)?;
        if for_sweep {
            for &v in &sweep_grid {
                let mut probe = run.clone();
                sweep_axis.apply(v, &mut probe)?;
                probe.validate(horizon)?;
            }
        }

        Ok(ExperimentConfig {
            env,
            run,
            num_seeds,
            sweep_axis,
            sweep_grid,
            out,
        })
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let mut grid = Vec::new();
    for tok in s.split_whitespace() {
        let v: f64 = tok.parse().map_err(|_| {
            Error::Config(format!("key 'sweep_grid': '{tok}' is not a number"))
        })?;
        if let Some(&last) = grid.last() {
            if v <= last {
                return Err(Error::Config(
                    "key 'sweep_grid': values must be strictly increasing".into(),
                ));
            }
        }
        grid.push(v);
    }
    Ok(grid)
}

/// Settings for the environment generator command.
#[derive(Debug, Clone)]
pub struct GenEnvConfig {
    pub kind: String,
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub dim: usize,
    pub noise: RewardNoise,
    pub out: Option<PathBuf>,
}

const GEN_KEYS: &[&str] = &[
    "gen_kind",
    "gen_seed",
    "gen_states",
    "gen_actions",
    "gen_horizon",
    "gen_dim",
    "reward_noise",
    "out",
];

impl GenEnvConfig {
    pub fn load(text: &str, config_dir: &Path, overrides: &Overrides) -> Result<GenEnvConfig> {
        let doc = Document::parse(text)?;
        doc.check_known(GEN_KEYS, &[])?;
        let kind = doc.get_str("gen_kind").unwrap_or("tabular").to_string();
        if kind != "tabular" && kind != "linear" {
            return Err(Error::Config(format!(
                "key 'gen_kind': expected tabular or linear, got '{kind}'"
            )));
        }
        let mut seed: u64 = doc.get_parsed("gen_seed")?.unwrap_or(0);
        if let Some(s) = overrides.seed {
            seed = s;
        }
        let noise = match doc.get_str("reward_noise") {
            Some(s) => textfmt::parse_noise(s)?,
            None => RewardNoise::Deterministic,
        };
        Ok(GenEnvConfig {
            kind,
            seed,
            states: require_positive(&doc, "gen_states")?,
            actions: require_positive(&doc, "gen_actions")?,
            horizon: require_positive(&doc, "gen_horizon")?,
            dim: doc.get_parsed("gen_dim")?.unwrap_or(1),
            noise,
            out: overrides
                .out
                .clone()
                .or_else(|| doc.get_str("out").map(|s| config_dir.join(s))),
        })
    }

    pub fn render(&self) -> String {
        let mut rng = stream(self.seed, StreamId::EnvGen { index: 0 });
        if self.kind == "linear" {
            textfmt::write_linear(&make_random_linear(
                self.dim,
                self.states,
                self.actions,
                self.horizon,
                self.noise,
                &mut rng,
            ))
        } else {
            textfmt::write_tabular(&make_random_tabular(
                self.states,
                self.actions,
                self.horizon,
                self.noise,
                &mut rng,
            ))
        }
    }
}
