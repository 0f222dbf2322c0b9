#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod report;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use expstab::acceptance::{Suite, CRITERIA};
use expstab::analysis::{compare_runs, MetricSpec};
use expstab::nussbaum::{uniform_grid, verify_enhanced, NussbaumSpec, VerifyOptions};
use expstab::scenarios::{build_named, NAMES};
use expstab::sim::{simulate, simulate_batch, RunStatus, Scenario, Trajectory};

use settings::{apply_all, load_config, parse_assignment, InvalidSetting};

/// Exit statuses.
const EXIT_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MONITOR: u8 = 4;

#[derive(Parser)]
#[command(name = "expstab", version, about = "Adaptive exponential stabilization: runs, comparisons and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write trajectory, diagnostics and report.
    Run(RunArgs),
    /// Simulate several scenarios in parallel and tabulate them.
    Compare(CompareArgs),
    /// Check the growth conditions of a Nussbaum function on a finite window.
    VerifyNussbaum(VerifyArgs),
    /// Run the acceptance suite.
    Acceptance(AcceptanceArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// Override a setting, e.g. `--set lambda=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Integration step in seconds.
    #[arg(long)]
    step: Option<f64>,
    /// Horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Suppress the report on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario name (see `--list`).
    #[arg(value_name = "SCENARIO")]
    name: Option<String>,
    #[arg(long = "scenario", conflicts_with = "name")]
    scenario: Option<String>,
    /// TOML config with `scenario` and [run], [gains], [scalar], [initial].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// List scenario names and exit.
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenarios to compare; defaults to the three wing-rock controllers.
    #[arg(value_name = "SCENARIO")]
    names: Vec<String>,
    #[arg(long = "scenario")]
    scenario: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Settling threshold on |x_1|.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    /// sin-exp-square or cos-exp-square.
    #[arg(long, default_value = "sin-exp-square")]
    function: String,
    /// Right end of the window.
    #[arg(long, default_value_t = 6.0)]
    xi_max: f64,
    /// Grid points per unit of the argument.
    #[arg(long, default_value_t = 100)]
    per_unit: usize,
    /// Level every running quantity must reach.
    #[arg(long, default_value_t = 10.0)]
    threshold: f64,
}

#[derive(Args)]
struct AcceptanceArgs {
    /// Only these criteria, e.g. `--only 6,8`.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    /// Also write the full report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::VerifyNussbaum(a) => cmd_verify(a),
        Command::Acceptance(a) => cmd_acceptance(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InvalidSetting>()) {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
    }
}

fn invalid(msg: String) -> anyhow::Error {
    InvalidSetting(msg).into()
}

fn build(name: Option<&str>, config: Option<&Path>, o: &Overrides) -> Result<Scenario> {
    let cfg = match config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let name = name
        .map(str::to_string)
        .or_else(|| cfg.as_ref().and_then(|c| c.scenario.clone()))
        .ok_or_else(|| invalid("no scenario given (name, --scenario or `scenario` in --config)".into()))?;
    let mut s = build_named(&name)
        .map_err(|_| invalid(format!("unknown scenario {name}; known: {}", NAMES.join(", "))))?;
    let mut list = cfg.map(|c| c.settings).unwrap_or_default();
    for a in &o.set {
        list.push(parse_assignment(a)?);
    }
    if let Some(h) = o.step {
        list.push(("step_s".into(), toml::Value::Float(h)));
    }
    if let Some(t) = o.horizon {
        list.push(("horizon_s".into(), toml::Value::Float(t)));
    }
    apply_all(&mut s, &list)?;
    Ok(s)
}

fn status_code(status: &RunStatus, monitors_ok: bool) -> u8 {
    match status {
        RunStatus::Completed if monitors_ok => 0,
        RunStatus::Completed | RunStatus::MonitorFailure { .. } => EXIT_MONITOR,
        RunStatus::Diverged { .. } | RunStatus::NussbaumOverflow { .. } => EXIT_DIVERGED,
        RunStatus::Failed { .. } => EXIT_FAILED,
    }
}

/// Writes the run artifacts; returns the exit status of the run.
fn write_run(dir: &Path, s: &Scenario, tr: &Trajectory, seconds: f64, quiet: bool) -> Result<u8> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    tr.save_csv(dir.join("trajectory.csv"))?;
    let diag = fs::File::create(dir.join("diagnostics.csv"))?;
    tr.write_diagnostics_csv(std::io::BufWriter::new(diag))?;
    tr.save_json(dir.join("trajectory.json"))?;
    let mons = report::monitors(s, tr);
    let text = report::render(s, tr, &mons, seconds);
    fs::write(dir.join("report.txt"), &text)?;
    if !quiet {
        print!("{text}");
    }
    Ok(status_code(&tr.status, mons.iter().all(|m| m.passed)))
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    if a.list {
        for n in NAMES {
            println!("{n}");
        }
        return Ok(0);
    }
    let name = a.name.as_deref().or(a.scenario.as_deref());
    let s = build(name, a.config.as_deref(), &a.overrides)?;
    let start = Instant::now();
    let tr = simulate(&s)?;
    write_run(&a.out, &s, &tr, start.elapsed().as_secs_f64(), a.overrides.quiet)
}

fn cmd_compare(a: CompareArgs) -> Result<u8> {
    let mut names = a.names.clone();
    names.extend(a.scenario.iter().cloned());
    if names.is_empty() {
        names = ["wing-rock-theorem1", "wing-rock-theorem2", "wing-rock-baseline-lambda0"]
            .map(String::from)
            .to_vec();
    }
    let scenarios = names
        .iter()
        .map(|n| build(Some(n), a.config.as_deref(), &a.overrides))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let runs = simulate_batch(&scenarios)
        .into_iter()
        .collect::<expstab::Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let mut code = 0;
    for ((name, s), tr) in names.iter().zip(&scenarios).zip(&runs) {
        code = code.max(write_run(&a.out.join(name), s, tr, seconds, true)?);
    }
    let lambda = scenarios[0].effective_gains().lambda.max(0.0);
    let spec = MetricSpec {
        settling_threshold: a.threshold,
        envelope_lambda: if lambda > 0.0 { lambda } else { MetricSpec::default().envelope_lambda },
    };
    let pairs: Vec<(&str, &Trajectory)> = names.iter().map(String::as_str).zip(&runs).collect();
    let table = compare_runs(&pairs, &spec).map_err(|e| invalid(e.to_string()))?;
    fs::write(a.out.join("comparison.csv"), table.to_csv())?;
    fs::write(a.out.join("comparison.txt"), table.to_string())?;
    if !a.overrides.quiet {
        print!("{table}");
    }
    Ok(code)
}

fn cmd_verify(a: VerifyArgs) -> Result<u8> {
    if a.per_unit == 0 || !(a.xi_max > 0.0) {
        bail!(invalid("xi-max and per-unit must be positive".into()));
    }
    let spec = NussbaumSpec::from_name(&a.function)
        .map_err(|e| invalid(e.to_string()))?
        .with_xi_max(a.xi_max);
    let opts = VerifyOptions {
        threshold: a.threshold,
        ..VerifyOptions::default()
    };
    let rep = verify_enhanced(&spec, &uniform_grid(a.xi_max, a.per_unit), &opts).map_err(|e| invalid(e.to_string()))?;
    print!("{rep}");
    Ok(if rep.all_passed() { 0 } else { EXIT_FAILED })
}

fn cmd_acceptance(a: AcceptanceArgs) -> Result<u8> {
    let ids: Vec<u8> = if a.only.is_empty() { CRITERIA.to_vec() } else { a.only.clone() };
    if let Some(bad) = ids.iter().find(|i| !CRITERIA.contains(i)) {
        bail!(invalid(format!("no criterion {bad}")));
    }
    let suite = Suite::new();
    if ids.iter().any(|i| [1, 2, 3, 4, 7, 9].contains(i)) {
        suite.prefetch();
    }
    let results = suite.run_criteria(&ids);
    let mut full = String::new();
    for r in &results {
        full.push_str(&r.to_string());
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("acceptance.txt"), &full)?;
    }
    if !a.quiet {
        print!("{full}");
    }
    for r in &results {
        println!("{}", r.line());
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { EXIT_FAILED })
}
