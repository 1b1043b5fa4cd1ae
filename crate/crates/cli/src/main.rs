//! Command-line harness: single runs, parameter sweeps, the internal
//! diagnostic suites, and environment generation.
//!
//! Exit codes: 0 success, 1 diagnostic failure, 2 bad configuration,
//! 3 runtime error.

mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{ExperimentConfig, GenEnvConfig, Overrides};
use onpg_core::checks::{all_pass, run_all, CheckOptions, CheckReport};
use onpg_core::driver::{self, OpeKind, RunResult};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "onpg",
    version,
    about = "Optimistic policy-iteration experiments on small episodic MDPs"
)]
struct Cli {
    /// Suppress informational messages.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one environment and write per-iteration records as CSV.
    Run(RunArgs),
    /// Repeat runs over a parameter grid and write one summary row each.
    Sweep(RunArgs),
    /// Execute the internal diagnostic suites and report one line per suite.
    Check(CheckArgs),
    /// Generate a random environment description file.
    GenEnv(GenEnvArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the evaluator family.
    #[arg(long, value_enum)]
    ope: Option<OpeArg>,
    /// Override the exploration-bonus scale multiplier.
    #[arg(long)]
    alpha_scale: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    /// Base seed for the diagnostic suites.
    #[arg(long)]
    seed: Option<u64>,
    /// Bonus scale multiplier handed to the optimism suites.
    #[arg(long)]
    alpha_scale: Option<f64>,
    /// Also write the report lines to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenEnvArgs {
    /// Path to a config file with generator settings (gen_kind, gen_states, ...).
    #[arg(long)]
    config: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the environment here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpeArg {
    Tabular,
    Linear,
    General,
}

impl From<OpeArg> for OpeKind {
    fn from(v: OpeArg) -> OpeKind {
        match v {
            OpeArg::Tabular => OpeKind::Tabular,
            OpeArg::Linear => OpeKind::Linear,
            OpeArg::General => OpeKind::General,
        }
    }
}

/// An error plus the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_thread_pool().and_then(|()| match &cli.command {
        Command::Run(args) => cmd_run(args, cli.quiet),
        Command::Sweep(args) => cmd_sweep(args, cli.quiet),
        Command::Check(args) => cmd_check(args, cli.quiet),
        Command::GenEnv(args) => cmd_gen_env(args, cli.quiet),
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Caps the worker pool when ONPG_THREADS is set.
fn init_thread_pool() -> Result<(), Failure> {
    match std::env::var("ONPG_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    config_err(format!(
                        "ONPG_THREADS must be a positive integer, got '{v}'"
                    ))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(runtime_err)
        }
        Err(_) => Ok(()),
    }
}

fn overrides_of(args: &RunArgs) -> Overrides {
    Overrides {
        seed: args.seed,
        out: args.out.clone(),
        ope: args.ope.map(OpeKind::from),
        alpha_scale: args.alpha_scale,
    }
}

fn load_experiment(args: &RunArgs, for_sweep: bool) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        config_err(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let dir = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let exp = ExperimentConfig::load(&text, &dir, &overrides_of(args), for_sweep)
        .map_err(config_err)?;
    let out = exp.out.clone().ok_or_else(|| {
        config_err("key 'out': an output path is required (set it in the config or pass --out)")
    })?;
    Ok((exp, out))
}

fn report_warnings(result: &RunResult, quiet: bool) {
    if !quiet {
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
    }
}

fn cmd_run(args: &RunArgs, quiet: bool) -> Result<ExitCode, Failure> {
    let (exp, out) = load_experiment(args, false)?;
    let horizon = exp.env.tabular().horizon;

    let mut jobs = Vec::with_capacity(exp.num_seeds);
    for s in 0..exp.num_seeds {
        let mut cfg = exp.run.clone();
        cfg.seed = exp.run.seed + s as u64;
        jobs.push(cfg);
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|cfg| driver::run(cfg, &exp.env))
        .collect::<onpg_core::Result<_>>()
        .map_err(runtime_err)?;

    let mut csv = String::from("k,t_k,vbar1,vpik,subopt");
    for h in 1..=horizon {
        csv.push_str(&format!(",mean_bonus_h{h}"));
    }
    csv.push_str(",opt_violations,seed\n");
    for (cfg, result) in jobs.iter().zip(&results) {
        for rec in &result.records {
            csv.push_str(&format!(
                "{},{},{},{},{}",
                rec.k, rec.t_k, rec.vbar1, rec.v_pik, rec.subopt
            ));
            for b in &rec.mean_bonus {
                csv.push_str(&format!(",{b}"));
            }
            csv.push_str(&format!(",{},{}\n", rec.optimism_violations, cfg.seed));
        }
    }
    std::fs::write(&out, csv).map_err(|e| {
        runtime_err(format!("cannot write {}: {e}", out.display()))
    })?;

    report_warnings(&results[0], quiet);
    if !quiet {
        let rows: usize = results.iter().map(|r| r.records.len()).sum();
        let mean_subopt: f64 =
            results.iter().map(|r| r.output_subopt).sum::<f64>() / results.len() as f64;
        println!(
            "run complete: {} seed(s), {} rows, mean output suboptimality {:.6}; wrote {}",
            results.len(),
            rows,
            mean_subopt,
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &RunArgs, quiet: bool) -> Result<ExitCode, Failure> {
    let (exp, out) = load_experiment(args, true)?;

    let mut jobs = Vec::with_capacity(exp.sweep_grid.len() * exp.num_seeds);
    for &value in &exp.sweep_grid {
        for s in 0..exp.num_seeds {
            let mut cfg = exp.run.clone();
            exp.sweep_axis.apply(value, &mut cfg).map_err(config_err)?;
            cfg.seed = exp.run.seed + s as u64;
            jobs.push((value, cfg));
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|(_, cfg)| driver::run(cfg, &exp.env))
        .collect::<onpg_core::Result<_>>()
        .map_err(runtime_err)?;

    let mut csv = String::from("axis_value,seed,final_subopt,mean_bonus_overall,episodes_used\n");
    for ((value, cfg), result) in jobs.iter().zip(&results) {
        let mean_bonus: f64 = result
            .records
            .iter()
            .map(|r| r.mean_bonus.iter().sum::<f64>() / r.mean_bonus.len() as f64)
            .sum::<f64>()
            / result.records.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            value, cfg.seed, result.output_subopt, mean_bonus, result.episodes_used
        ));
    }
    std::fs::write(&out, csv).map_err(|e| {
        runtime_err(format!("cannot write {}: {e}", out.display()))
    })?;

    report_warnings(&results[0], quiet);
    if !quiet {
        println!(
            "sweep complete: {} grid point(s) x {} seed(s); wrote {}",
            exp.sweep_grid.len(),
            exp.num_seeds,
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn report_line(r: &CheckReport) -> String {
    format!(
        "{} {} instances={} {}={:.6e} {}",
        if r.pass { "PASS" } else { "FAIL" },
        r.name,
        r.instances,
        r.metric_name,
        r.metric,
        r.detail
    )
}

fn cmd_check(args: &CheckArgs, quiet: bool) -> Result<ExitCode, Failure> {
    let options = CheckOptions {
        seed: args.seed.unwrap_or(0),
        alpha_scale: args.alpha_scale.unwrap_or(1.0),
    };
    let reports = run_all(options).map_err(runtime_err)?;
    let mut lines = String::new();
    for r in &reports {
        let line = report_line(r);
        if !quiet {
            println!("{line}");
        }
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(out) = &args.out {
        std::fs::write(out, lines).map_err(|e| {
            runtime_err(format!("cannot write {}: {e}", out.display()))
        })?;
    }
    if all_pass(&reports) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_gen_env(args: &GenEnvArgs, quiet: bool) -> Result<ExitCode, Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        config_err(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let dir = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        ope: None,
        alpha_scale: None,
    };
    let gen = GenEnvConfig::load(&text, &dir, &overrides).map_err(config_err)?;
    let body = gen.render();
    match &gen.out {
        Some(path) => {
            std::fs::write(path, &body).map_err(|e| {
                runtime_err(format!("cannot write {}: {e}", path.display()))
            })?;
            if !quiet {
                println!(
                    "wrote {} {}x{}x{} environment to {}",
                    gen.kind,
                    gen.states,
                    gen.actions,
                    gen.horizon,
                    path.display()
                );
            }
        }
        None => print!("{body}"),
    }
    Ok(ExitCode::SUCCESS)
}
