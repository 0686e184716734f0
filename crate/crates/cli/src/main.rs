//! `cure`: runs energy-harvesting campaigns and parameter sweeps from a
//! scenario file and writes plot-ready CSV.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid scenario or argument
//! value, 3 failure while running or writing results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cure_core::config::{ConfigError, ScenarioSpec};
use cure_core::powerctl::write_trace_csv;
use cure_core::ris::write_panel_csv;
use cure_core::sim::{
    build_layout, run_campaign, sweep, write_cdf, write_harvested, write_per_user_se, write_sweep, CampaignResult,
    RunMeta, RunOptions, SimError, SweepAxis, SweepMeta,
};
use thiserror::Error;

const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.cfg");
const OUT_ENV: &str = "CURE_OUT";
const DEFAULT_OUT: &str = "cure_out";

#[derive(Debug, Parser)]
#[command(name = "cure", version, about = "RIS-assisted RF energy harvesting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo campaign.
    Run(RunArgs),
    /// Run one campaign per value of a scenario parameter.
    Sweep(SweepArgs),
    /// Print node positions of one setup as CSV.
    Layout(LayoutArgs),
    /// Check a scenario file without running it.
    Validate(ScenarioArg),
}

#[derive(Debug, Args)]
struct ScenarioArg {
    /// Scenario file; the bundled reference scenario when omitted.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Output directory [default: $CURE_OUT or ./cure_out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the scenario's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of setups.
    #[arg(long)]
    setups: Option<usize>,
    /// Apply the RIS panels.
    #[arg(long, value_enum, default_value = "on")]
    ris: Switch,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    /// Also write each setup's channel ensemble to channels/.
    #[arg(long)]
    dump_channels: bool,
    /// Also write each setup's bisection trace to trace/.
    #[arg(long)]
    trace: bool,
    /// Also write each setup's RIS phases to panels/.
    #[arg(long)]
    panels: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    /// ris_elements, ap_antennas, ris_count, ap_count or strategy.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    values: Vec<String>,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Override the scenario's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Setup whose users are placed.
    #[arg(long, default_value_t = 0)]
    setup: usize,
    /// Write layout.csv here instead of printing it.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_)
            | SimError::Geometry(_)
            | SimError::SweepValue { .. }
            | SimError::UnknownAxis(_)
            | SimError::NoSweepValues => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn csv<F>(f: F) -> Vec<u8>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn load_scenario(arg: &ScenarioArg) -> Result<ScenarioSpec, CliError> {
    Ok(match &arg.scenario {
        Some(path) => ScenarioSpec::load(path)?,
        None => ScenarioSpec::parse(DEFAULT_SCENARIO)?,
    })
}

fn output_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn campaign_setup(args: &CampaignArgs) -> Result<(ScenarioSpec, RunOptions, PathBuf), CliError> {
    let mut spec = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(setups) = args.setups {
        spec.setups = setups;
    }
    let spec = spec.finalize()?;
    let opts = RunOptions {
        ris_enabled: args.ris == Switch::On,
        workers: args.workers,
        ..RunOptions::default()
    };
    Ok((spec, opts, output_dir(&args.out)))
}

fn write_json<T: serde::Serialize>(dir: &Path, meta: &T) -> Result<(), CliError> {
    let path = dir.join("run_meta.json");
    let json = serde_json::to_string_pretty(meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&path, format!("{json}\n").as_bytes())
}

/// Writes the campaign CSVs and metadata into `dir`.
fn emit_outputs(dir: &Path, result: &CampaignResult, meta: &RunMeta) -> Result<(), CliError> {
    make_dir(dir)?;
    write_file(&dir.join("per_user_se.csv"), &csv(|b| write_per_user_se(b, result)))?;
    write_file(&dir.join("harvested.csv"), &csv(|b| write_harvested(b, result)))?;
    write_file(&dir.join("cdf_se.csv"), &csv(|b| write_cdf(b, &result.cdf_se)))?;
    write_file(&dir.join("cdf_energy.csv"), &csv(|b| write_cdf(b, &result.cdf_energy)))?;
    write_json(dir, meta)
}

fn per_setup_dir(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let sub = dir.join(name);
    make_dir(&sub)?;
    Ok(sub)
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let (spec, mut opts, dir) = campaign_setup(&args.campaign)?;
    opts.keep_channels = args.dump_channels;
    let start = Instant::now();
    let result = run_campaign(&spec, &opts)?;
    let meta = RunMeta::new(&spec, &opts, &result, start.elapsed().as_secs_f64());
    emit_outputs(&dir, &result, &meta)?;
    if args.trace {
        let sub = per_setup_dir(&dir, "trace")?;
        for s in &result.setups {
            let bytes = csv(|b| write_trace_csv(b, &s.trace));
            write_file(&sub.join(format!("setup_{:04}.csv", s.setup_index)), &bytes)?;
        }
    }
    if args.panels {
        let sub = per_setup_dir(&dir, "panels")?;
        for s in &result.setups {
            let bytes = csv(|b| write_panel_csv(b, &s.panels));
            write_file(&sub.join(format!("setup_{:04}.csv", s.setup_index)), &bytes)?;
        }
    }
    if args.dump_channels {
        let sub = per_setup_dir(&dir, "channels")?;
        for s in &result.setups {
            if let Some(bytes) = &s.channels {
                write_file(&sub.join(format!("setup_{:04}.bin", s.setup_index)), bytes)?;
            }
        }
    }
    let sm = &result.summary;
    println!(
        "{} setups ({} infeasible, {} retries): mean SE {:.6e} bit/s/Hz, mean energy {:.6e}; results in {}",
        result.setups.len(),
        sm.infeasible_setups,
        sm.total_retries,
        sm.mean_se,
        sm.mean_energy,
        dir.display()
    );
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (spec, opts, dir) = campaign_setup(&args.campaign)?;
    let start = Instant::now();
    let rows = sweep(&spec, args.axis, &args.values, &opts)?;
    make_dir(&dir)?;
    write_file(&dir.join("sweep.csv"), &csv(|b| write_sweep(b, &rows)))?;
    let meta = SweepMeta::new(&spec, &opts, &rows, start.elapsed().as_secs_f64());
    write_json(&dir, &meta)?;
    println!(
        "{} sweep rows over {}; results in {}",
        rows.len(),
        args.axis,
        dir.display()
    );
    Ok(())
}

fn layout(args: &LayoutArgs) -> Result<(), CliError> {
    let mut spec = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let spec = spec.finalize()?;
    let net = build_layout(&spec, spec.seed.wrapping_add(args.setup as u64))?;
    let bytes = csv(|b| net.write_csv(b));
    match &args.out {
        Some(dir) => {
            make_dir(dir)?;
            write_file(&dir.join("layout.csv"), &bytes)
        }
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
    }
}

fn validate(args: &ScenarioArg) -> Result<(), CliError> {
    let spec = load_scenario(args)?;
    let source = args
        .scenario
        .as_ref()
        .map_or_else(|| "bundled scenario".to_string(), |p| p.display().to_string());
    println!(
        "{source}: valid ({} APs x {} antennas, {} users, {} RIS x {} elements, rho_d {} W)",
        spec.ap_count, spec.antennas, spec.user_count, spec.ris_count, spec.ris_elements, spec.system.rho_d
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Layout(a) => layout(a),
        Command::Validate(a) => validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
