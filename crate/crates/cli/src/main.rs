use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ctxlake::analyzer::{analyze, ViolationReport};
use ctxlake::composed::run_comparison;
use ctxlake::envelope::EnvelopeMetrics;
use ctxlake::semantic::PrototypeSet;
use ctxlake::sim::{run_scenario, Mode, ScenarioConfig};
use ctxlake::trace::Trace;
use serde::{Deserialize, Serialize};

/// Run coordination scenarios against a Context Lake or a composed baseline
/// and check the resulting traces.
#[derive(Parser)]
#[command(name = "ctxlake", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario, writing trace.jsonl and report.json.
    Run(RunArgs),
    /// Analyze a trace file.
    Check(CheckArgs),
    /// Run a scenario in both modes over a lag grid and seed list.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Knobs {
    #[arg(long)]
    delta_ms: Option<u64>,
    #[arg(long)]
    max_concurrent: Option<usize>,
    /// Subsystem lag as KEY=MS; repeatable.
    #[arg(long = "lag", value_parser = parse_lag)]
    lags: Vec<(String, u64)>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, env = "CTXLAKE_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: Knobs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: String,
    /// Either a list (0,20,60) or an inclusive range with step (0..120:20).
    #[arg(long, allow_hyphen_values = true)]
    lag_grid: String,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long, default_value = "sweep-out")]
    out: PathBuf,
}

/// Scenario config as accepted by `run --config`, plus the output directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    scenario: Option<String>,
    mode: Option<Mode>,
    delta_ms: Option<u64>,
    max_concurrent: Option<usize>,
    #[serde(default)]
    lags: BTreeMap<String, u64>,
    seed: Option<u64>,
    admission_control: Option<bool>,
    prototypes: Option<PrototypeSet>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunReport<'a> {
    #[serde(flatten)]
    report: &'a ViolationReport,
    config: &'a ScenarioConfig,
    metrics: &'a EnvelopeMetrics,
}

fn parse_lag(s: &str) -> Result<(String, u64), String> {
    let (key, ms) = s.split_once('=').ok_or_else(|| format!("expected KEY=MS, got {s:?}"))?;
    let ms = ms.trim().parse().map_err(|_| format!("lag {key:?} is not a whole number of milliseconds"))?;
    Ok((key.trim().to_string(), ms))
}

fn parse_grid(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((range, step)) = spec.split_once(':') {
        let (start, end) = range.split_once("..").context("range grid must look like START..END:STEP")?;
        let (start, end, step): (u64, u64, u64) =
            (start.trim().parse()?, end.trim().trim_start_matches('=').parse()?, step.trim().parse()?);
        if step == 0 {
            bail!("grid step must be positive");
        }
        return Ok((start..=end).step_by(step as usize).collect());
    }
    spec.split(',').map(|p| p.trim().parse::<u64>().with_context(|| format!("bad lag {p:?}"))).collect()
}

impl Knobs {
    fn apply(&self, config: &mut ScenarioConfig) {
        if let Some(d) = self.delta_ms {
            config.delta_ms = d;
        }
        if let Some(c) = self.max_concurrent {
            config.max_concurrent = c;
        }
        for (k, ms) in &self.lags {
            config.lags.insert(k.clone(), *ms);
        }
    }
}

fn resolve_run(args: &RunArgs) -> Result<(ScenarioConfig, PathBuf)> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let scenario = args.scenario.clone().or(file.scenario).context("--scenario is required")?;
    let mut config = ScenarioConfig::new(&scenario);
    config.mode = args.mode.or(file.mode).unwrap_or_default();
    config.delta_ms = file.delta_ms.unwrap_or(config.delta_ms);
    config.max_concurrent = file.max_concurrent.unwrap_or(config.max_concurrent);
    config.lags = file.lags;
    config.seed = args.seed.or(file.seed).unwrap_or(0);
    config.admission_control = file.admission_control;
    config.prototypes = file.prototypes;
    args.knobs.apply(&mut config);
    config.validate()?;
    let out = args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("ctxlake-out"));
    Ok((config, out))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn status(report: &ViolationReport) -> ExitCode {
    if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn summary_line(report: &ViolationReport) -> String {
    let s = &report.summary;
    format!("{} decisions, {} admitted, {} violations", s.decisions, s.admitted, report.violation_count())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let (config, out) = resolve_run(&args)?;
    let run = run_scenario(&config)?;
    let report = analyze(&run.trace);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    run.trace.save(&out.join("trace.jsonl"))?;
    write_json(&out.join("report.json"), &RunReport { report: &report, config: &config, metrics: &run.metrics })?;
    println!("{} [{}, seed {}]: {}", config.scenario, config.mode, config.seed, summary_line(&report));
    Ok(status(&report))
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    let trace = Trace::load(&args.trace).with_context(|| format!("loading {}", args.trace.display()))?;
    let report = analyze(&trace);
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}: {}", args.trace.display(), summary_line(&report));
    for f in &report.details {
        println!("  {:<26} {:<24} {}", f.code, f.decision_id.as_deref().unwrap_or("-"), f.detail);
    }
    Ok(status(&report))
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let grid = parse_grid(&args.lag_grid)?;
    if grid.is_empty() {
        bail!("lag grid {:?} is empty", args.lag_grid);
    }
    if args.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let mut base = ScenarioConfig::new(&args.scenario);
    args.knobs.apply(&mut base);
    let report = run_comparison(&base, &grid, &args.seeds)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv = report.to_csv();
    fs::write(args.out.join("comparison.csv"), &csv)?;
    write_json(&args.out.join("comparison.json"), &report)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Check(args) => cmd_check(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    result.unwrap_or_else(|err| {
        eprintln!("error: {err:#}");
        ExitCode::from(2)
    })
}
