//! Monte Carlo campaigns: the per-setup pipeline, pooled CDFs, parameter
//! sweeps and the CSV outputs built from them.
//!
//! Setup `i` of a campaign draws everything from ChaCha streams keyed by
//! `seed + i`, so results do not depend on which worker runs which setup.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{
    draw_channels, large_scale, lmmse_estimate, write_channel_dump, ChannelError, ChannelRealization, LargeScaleParams,
};
use crate::config::{ConfigError, ScenarioSpec};
use crate::geometry::{grid_aps, place_ris, place_users, GeometryError, NetworkLayout};
use crate::powerctl::{mmf_solve_with, MmfProblem, PowerControlError, SolverSettings, TraceRow};
use crate::ris::{configure, RisPanel};
use crate::wpt::{mrt_precoders, stat_terms, StatTerms, WptError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Wpt(#[from] WptError),
    #[error(transparent)]
    PowerControl(#[from] PowerControlError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("empirical CDF of an empty sample")]
    EmptySample,
    #[error("invalid value {value:?} for sweep axis {axis}")]
    SweepValue { axis: SweepAxis, value: String },
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
    #[error("sweep needs at least one value")]
    NoSweepValues,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seed offset added on each redraw of a setup whose solver did not converge.
pub const RETRY_SEED_OFFSET: u64 = 1_000_000;
pub const MAX_RETRIES: u32 = 3;

const STREAM_USERS: u64 = 0;
const STREAM_LARGE_SCALE: u64 = 1;
const STREAM_SMALL_SCALE: u64 = 2;
const STREAM_PILOT_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Campaign-wide switches that are not part of the scenario itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Apply the RIS boost when the scenario has panels.
    pub ris_enabled: bool,
    /// Worker threads; 0 picks the machine's parallelism.
    pub workers: usize,
    /// Keep a binary dump of each setup's channel ensemble.
    pub keep_channels: bool,
    pub solver: SolverSettings,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ris_enabled: true,
            workers: 0,
            keep_channels: false,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupResult {
    pub setup_index: usize,
    /// Seed of the accepted draw, retries included.
    pub seed: u64,
    pub retries: u32,
    pub feasible: bool,
    pub ris_enabled: bool,
    pub per_user_se: Vec<f64>,
    pub per_user_energy: Vec<f64>,
    pub per_user_input_power: Vec<f64>,
    pub per_ap_power: Vec<f64>,
    pub min_se: f64,
    pub solver_iterations: usize,
    pub trace: Vec<TraceRow>,
    pub panels: Vec<RisPanel>,
    /// Channel dump of the accepted draw, when requested.
    pub channels: Option<Vec<u8>>,
}

/// Node positions of a setup. APs and panels are fixed by the scenario;
/// users come from the seed's user stream.
pub fn build_layout(spec: &ScenarioSpec, seed: u64) -> Result<NetworkLayout, SimError> {
    let side = spec.coverage_m;
    let aps = grid_aps(spec.ap_count, side, spec.ap_height_m)?;
    let ris = if spec.ris_count > 0 {
        place_ris(spec.strategy, spec.ris_count, &aps, side, spec.ris_height_m)?
    } else {
        Vec::new()
    };
    let mut rng = stream(seed, STREAM_USERS);
    let users = place_users(spec.user_count, side, spec.user_height_m, &mut rng)?;
    Ok(NetworkLayout {
        coverage_side: side,
        ap_positions: aps,
        ris_positions: ris,
        user_positions: users,
    })
}

/// Everything a setup draws before power control.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub layout: NetworkLayout,
    pub ls: LargeScaleParams,
    pub ensemble: Vec<ChannelRealization>,
    pub st: StatTerms,
}

/// Places users, draws and estimates channels and builds the precoder
/// statistics for one seed.
pub fn prepare(spec: &ScenarioSpec, seed: u64) -> Result<Prepared, SimError> {
    let sys = &spec.system;
    let layout = build_layout(spec, seed)?;
    let ls = large_scale(&layout, sys, spec.antennas, &mut stream(seed, STREAM_LARGE_SCALE));
    let ensemble = draw_channels(&ls, spec.mc_realizations, &mut stream(seed, STREAM_SMALL_SCALE))?;
    let est = lmmse_estimate(&ensemble, &ls, sys, &mut stream(seed, STREAM_PILOT_NOISE))?;
    let w = mrt_precoders(&est.per_realization, &ls)?;
    let st = stat_terms(&ensemble, &w, &ls)?;
    Ok(Prepared {
        layout,
        ls,
        ensemble,
        st,
    })
}

fn setup_seed(spec: &ScenarioSpec, setup_index: usize, attempt: u32) -> u64 {
    spec.seed
        .wrapping_add(setup_index as u64)
        .wrapping_add(u64::from(attempt) * RETRY_SEED_OFFSET)
}

/// One draw of the pipeline. `Ok(None)` means the solver did not converge.
fn attempt(
    spec: &ScenarioSpec,
    setup_index: usize,
    seed: u64,
    retries: u32,
    opts: &RunOptions,
) -> Result<Option<SetupResult>, SimError> {
    let sys = &spec.system;
    let Prepared {
        layout,
        ls,
        ensemble,
        st,
    } = prepare(spec, seed)?;
    let deployment = if opts.ris_enabled {
        configure(&layout, &ls, sys, spec.ris_elements, spec.ris_alpha)
    } else {
        None
    };
    // power control sees the direct channels only; panels act on the result
    let prob = MmfProblem::new(st, sys.clone(), spec.rectifier, spec.mode, spec.eh_model);
    let sol = match mmf_solve_with(&prob, &opts.solver) {
        Ok(sol) if sol.feasible => sol,
        Ok(_) | Err(PowerControlError::NonPositiveDenominator { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let boosted = prob.with_boost(deployment.as_ref().map(|d| d.boost.clone()));
    let ev = boosted.evaluate(&sol.p)?;
    if !ev.se.iter().chain(&ev.energy).all(|v| v.is_finite()) {
        return Ok(None);
    }
    let channels = if opts.keep_channels {
        let mut buf = Vec::new();
        write_channel_dump(&mut buf, &ls, &ensemble)?;
        Some(buf)
    } else {
        None
    };
    Ok(Some(SetupResult {
        setup_index,
        seed,
        retries,
        feasible: true,
        ris_enabled: deployment.is_some(),
        min_se: ev.min_se(),
        per_user_se: ev.se,
        per_user_energy: ev.energy,
        per_user_input_power: ev.input_power,
        per_ap_power: sol.ap_power,
        solver_iterations: sol.iterations,
        trace: sol.trace,
        panels: deployment.map(|d| d.panels).unwrap_or_default(),
        channels,
    }))
}

/// Runs setup `setup_index`, redrawing up to [`MAX_RETRIES`] times when the
/// solver fails to converge.
pub fn run_setup(spec: &ScenarioSpec, setup_index: usize, opts: &RunOptions) -> Result<SetupResult, SimError> {
    for retries in 0..=MAX_RETRIES {
        let seed = setup_seed(spec, setup_index, retries);
        if let Some(result) = attempt(spec, setup_index, seed, retries, opts)? {
            return Ok(result);
        }
    }
    let (nj, nu) = (spec.user_count, spec.ap_count);
    Ok(SetupResult {
        setup_index,
        seed: setup_seed(spec, setup_index, MAX_RETRIES),
        retries: MAX_RETRIES,
        feasible: false,
        ris_enabled: opts.ris_enabled && spec.ris_count > 0,
        per_user_se: vec![f64::NAN; nj],
        per_user_energy: vec![f64::NAN; nj],
        per_user_input_power: vec![f64::NAN; nj],
        per_ap_power: vec![f64::NAN; nu],
        min_se: f64::NAN,
        solver_iterations: 0,
        trace: Vec::new(),
        panels: Vec::new(),
        channels: None,
    })
}

/// Sorted `(value, probability)` pairs. The k-th smallest value gets `k/n`
/// and tied values all take the largest probability of their run.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = vec![(0.0, 0.0); n];
    let mut k = n;
    while k > 0 {
        let v = sorted[k - 1];
        let p = k as f64 / n as f64;
        while k > 0 && sorted[k - 1] == v {
            out[k - 1] = (v, p);
            k -= 1;
        }
    }
    Ok(out)
}

/// Value of a step CDF at `x`.
pub fn cdf_at(cdf: &[(f64, f64)], x: f64) -> f64 {
    let idx = cdf.partition_point(|(v, _)| *v <= x);
    if idx == 0 {
        0.0
    } else {
        cdf[idx - 1].1
    }
}

/// True when `a` first-order stochastically dominates `b`: `F_a <= F_b` at
/// every sample point of either CDF.
pub fn dominates(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
    a.iter().chain(b).all(|(x, _)| cdf_at(a, *x) <= cdf_at(b, *x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean_se: f64,
    pub median_se: f64,
    pub mean_energy: f64,
    pub median_energy: f64,
    /// Mean over feasible setups of the smallest per-user SE.
    pub mean_min_se: f64,
    pub feasible_setups: usize,
    pub infeasible_setups: usize,
    pub total_retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    /// Ordered by setup index.
    pub setups: Vec<SetupResult>,
    pub cdf_se: Vec<(f64, f64)>,
    pub cdf_energy: Vec<(f64, f64)>,
    pub summary: Summary,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(sorted_cdf: &[(f64, f64)]) -> f64 {
    let n = sorted_cdf.len();
    if n % 2 == 1 {
        sorted_cdf[n / 2].0
    } else {
        0.5 * (sorted_cdf[n / 2 - 1].0 + sorted_cdf[n / 2].0)
    }
}

/// Pools the feasible setups. Sums run over sorted samples so the result
/// does not depend on setup order.
pub fn aggregate(mut setups: Vec<SetupResult>) -> Result<CampaignResult, SimError> {
    setups.sort_by_key(|s| s.setup_index);
    let feasible: Vec<&SetupResult> = setups.iter().filter(|s| s.feasible).collect();
    let se: Vec<f64> = feasible.iter().flat_map(|s| s.per_user_se.iter().copied()).collect();
    let energy: Vec<f64> = feasible
        .iter()
        .flat_map(|s| s.per_user_energy.iter().copied())
        .collect();
    let cdf_se = empirical_cdf(&se)?;
    let cdf_energy = empirical_cdf(&energy)?;
    let mut min_se: Vec<f64> = feasible.iter().map(|s| s.min_se).collect();
    min_se.sort_by(f64::total_cmp);
    let sorted = |cdf: &[(f64, f64)]| cdf.iter().map(|(v, _)| *v).collect::<Vec<_>>();
    let summary = Summary {
        mean_se: mean(&sorted(&cdf_se)),
        median_se: median(&cdf_se),
        mean_energy: mean(&sorted(&cdf_energy)),
        median_energy: median(&cdf_energy),
        mean_min_se: mean(&min_se),
        feasible_setups: feasible.len(),
        infeasible_setups: setups.len() - feasible.len(),
        total_retries: setups.iter().map(|s| s.retries).sum(),
    };
    Ok(CampaignResult {
        setups,
        cdf_se,
        cdf_energy,
        summary,
    })
}

/// Runs every setup of the scenario on `opts.workers` threads.
pub fn run_campaign(spec: &ScenarioSpec, opts: &RunOptions) -> Result<CampaignResult, SimError> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    let setups = pool.install(|| {
        (0..spec.setups)
            .into_par_iter()
            .map(|i| run_setup(spec, i, opts))
            .collect::<Result<Vec<_>, _>>()
    })?;
    aggregate(setups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RisElements,
    ApAntennas,
    RisCount,
    ApCount,
    Strategy,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        Self::RisElements,
        Self::ApAntennas,
        Self::RisCount,
        Self::ApCount,
        Self::Strategy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RisElements => "ris_elements",
            Self::ApAntennas => "ap_antennas",
            Self::RisCount => "ris_count",
            Self::ApCount => "ap_count",
            Self::Strategy => "strategy",
        }
    }

    /// Copy of `spec` with this axis set to `value`, validated.
    pub fn apply(self, spec: &ScenarioSpec, value: &str) -> Result<ScenarioSpec, SimError> {
        let bad = || SimError::SweepValue {
            axis: self,
            value: value.to_string(),
        };
        let count = || value.trim().parse::<usize>().map_err(|_| bad());
        let mut out = spec.clone();
        match self {
            Self::RisElements => out.ris_elements = count()?,
            Self::ApAntennas => out.antennas = count()?,
            Self::RisCount => out.ris_count = count()?,
            Self::ApCount => out.ap_count = count()?,
            Self::Strategy => out.strategy = value.trim().parse().map_err(|_| bad())?,
        }
        out.finalize().map_err(|_| bad())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SimError::UnknownAxis(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub summary: Summary,
}

/// One campaign per value, all sharing the scenario's base seed.
pub fn sweep(
    spec: &ScenarioSpec,
    axis: SweepAxis,
    values: &[String],
    opts: &RunOptions,
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::NoSweepValues);
    }
    let specs = values
        .iter()
        .map(|v| axis.apply(spec, v))
        .collect::<Result<Vec<_>, _>>()?;
    specs
        .iter()
        .zip(values)
        .map(|(s, v)| {
            Ok(SweepRow {
                axis,
                value: v.trim().to_string(),
                summary: run_campaign(s, opts)?.summary,
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `setup,user,se_bits_per_hz` for every feasible setup.
pub fn write_per_user_se<W: Write>(mut out: W, result: &CampaignResult) -> std::io::Result<()> {
    writeln!(out, "setup,user,se_bits_per_hz")?;
    for s in result.setups.iter().filter(|s| s.feasible) {
        for (j, se) in s.per_user_se.iter().enumerate() {
            writeln!(out, "{},{j},{}", s.setup_index, num(*se))?;
        }
    }
    Ok(())
}

/// `setup,user,input_power_w,harvested_sample_w` for every feasible setup.
pub fn write_harvested<W: Write>(mut out: W, result: &CampaignResult) -> std::io::Result<()> {
    writeln!(out, "setup,user,input_power_w,harvested_sample_w")?;
    for s in result.setups.iter().filter(|s| s.feasible) {
        for (j, (i, e)) in s.per_user_input_power.iter().zip(&s.per_user_energy).enumerate() {
            writeln!(out, "{},{j},{},{}", s.setup_index, num(*i), num(*e))?;
        }
    }
    Ok(())
}

/// `value,cdf` rows.
pub fn write_cdf<W: Write>(mut out: W, cdf: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "value,cdf")?;
    for (v, p) in cdf {
        writeln!(out, "{},{}", num(*v), num(*p))?;
    }
    Ok(())
}

/// `axis,value,mean_energy,mean_min_se` rows.
pub fn write_sweep<W: Write>(mut out: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "axis,value,mean_energy,mean_min_se")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.axis,
            r.value,
            num(r.summary.mean_energy),
            num(r.summary.mean_min_se)
        )?;
    }
    Ok(())
}

/// Contents of `run_meta.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub spec: ScenarioSpec,
    /// The scenario in file form; loading it reproduces the run.
    pub scenario_text: String,
    pub seed: u64,
    pub ris_enabled: bool,
    pub retries: Vec<u32>,
    pub infeasible_setups: Vec<usize>,
    pub solver: SolverSettings,
    pub retry_seed_offset: u64,
    pub max_retries: u32,
    pub summary: Summary,
    pub wall_time_s: f64,
}

impl RunMeta {
    pub fn new(spec: &ScenarioSpec, opts: &RunOptions, result: &CampaignResult, wall_time_s: f64) -> Self {
        RunMeta {
            spec: spec.clone(),
            scenario_text: spec.to_kv_string(),
            seed: spec.seed,
            ris_enabled: opts.ris_enabled,
            retries: result.setups.iter().map(|s| s.retries).collect(),
            infeasible_setups: result
                .setups
                .iter()
                .filter(|s| !s.feasible)
                .map(|s| s.setup_index)
                .collect(),
            solver: opts.solver,
            retry_seed_offset: RETRY_SEED_OFFSET,
            max_retries: MAX_RETRIES,
            summary: result.summary,
            wall_time_s,
        }
    }
}

/// Contents of `run_meta.json` for a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepMeta {
    pub spec: ScenarioSpec,
    pub scenario_text: String,
    pub seed: u64,
    pub ris_enabled: bool,
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub solver: SolverSettings,
    pub summaries: Vec<Summary>,
    pub wall_time_s: f64,
}

impl SweepMeta {
    pub fn new(spec: &ScenarioSpec, opts: &RunOptions, rows: &[SweepRow], wall_time_s: f64) -> Self {
        SweepMeta {
            spec: spec.clone(),
            scenario_text: spec.to_kv_string(),
            seed: spec.seed,
            ris_enabled: opts.ris_enabled,
            axis: rows.first().map_or(SweepAxis::Strategy, |r| r.axis),
            values: rows.iter().map(|r| r.value.clone()).collect(),
            solver: opts.solver,
            summaries: rows.iter().map(|r| r.summary).collect(),
            wall_time_s,
        }
    }
}
