//! Max-min fairness power control.
//!
//! Users spend the energy they harvest during the downlink phase on uplink
//! transmission. Their uplink spectral efficiency follows from a
//! use-and-then-forget bound with MR combining built from the same estimates
//! as the energy precoders. [`mmf_solve`] bisects on a common SE target and
//! tests each target with projected subgradient ascent on the worst user's
//! SE over the downlink power coefficients.

use serde::Serialize;
use thiserror::Error;

use crate::config::{EhModel, RectifierParams, SystemParams, TransmissionMode};
use crate::ris::RisBoost;
use crate::wpt::{
    ap_transmit_power, check_power_constraint, coherent_quadratic, harvested_energy, harvested_energy_slope,
    PowerCoefficients, StatTerms,
};

#[derive(Debug, Error, PartialEq)]
pub enum PowerControlError {
    #[error("SINR denominator for user {user} is {value:e}; statistics are corrupted")]
    NonPositiveDenominator { user: usize, value: f64 },
    #[error("feasibility check needs at least one rate")]
    NoRates,
    #[error("rectifier list has {got} entries for {expected} users")]
    RectifierCount { got: usize, expected: usize },
    #[error("statistics are not Hermitian (defect {0:e})")]
    NotHermitian(f64),
}

/// Uplink transmit power when all harvested energy is spread evenly over the
/// uplink samples.
pub fn uplink_power_from_energy(energy: f64, delta_u: usize) -> f64 {
    energy / delta_u as f64
}

/// Uplink SINR of every user under the use-and-then-forget bound.
pub fn uplink_sinr(p_ul: &[f64], st: &StatTerms, sys: &SystemParams) -> Result<Vec<f64>, PowerControlError> {
    let nj = st.n_users;
    (0..nj)
        .map(|j| {
            let signal = st.uplink_signal(j).norm_sqr();
            let total: f64 = (0..nj).map(|m| p_ul[m] * st.uplink_cross(j, m)).sum();
            let den = total - p_ul[j] * signal + sys.sigma2 * st.combiner_power(j);
            if !(den > 0.0) {
                return Err(PowerControlError::NonPositiveDenominator { user: j, value: den });
            }
            Ok(p_ul[j] * signal / den)
        })
        .collect()
}

/// `(delta_u / delta_c) log2(1 + sinr)`.
pub fn spectral_efficiency(sinr: f64, sys: &SystemParams) -> f64 {
    prelog(sys) * (1.0 + sinr).log2()
}

fn prelog(sys: &SystemParams) -> f64 {
    sys.delta_u as f64 / sys.delta_c as f64
}

/// Tolerance used when comparing rates with a target.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

pub fn feasibility(rates: &[f64], target: f64) -> Result<bool, PowerControlError> {
    let min = rates
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or(PowerControlError::NoRates)?;
    Ok(min >= target - FEASIBILITY_TOLERANCE)
}

/// Hyperparameters of the bisection and the inner ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    /// Ascent iterations per feasibility test.
    pub max_iters: usize,
    /// Maximum bisection rounds.
    pub max_rounds: usize,
    /// Bisection stops once the bracket is narrower than this fraction of its upper end.
    pub relative_tolerance: f64,
    /// First ascent step length as a fraction of the warm start's norm; later
    /// steps shrink as `1/sqrt(k)`.
    pub step_scale: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iters: 500,
            max_rounds: 30,
            relative_tolerance: 1e-4,
            step_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MmfProblem {
    pub st: StatTerms,
    pub sys: SystemParams,
    /// One rectifier per user.
    pub rect: Vec<RectifierParams>,
    pub mode: TransmissionMode,
    pub eh_model: EhModel,
    pub ris_boost: Option<RisBoost>,
}

/// Everything that follows from one choice of power coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub input_power: Vec<f64>,
    pub energy: Vec<f64>,
    pub uplink_power: Vec<f64>,
    pub sinr: Vec<f64>,
    pub se: Vec<f64>,
}

impl Evaluation {
    pub fn min_se(&self) -> f64 {
        self.se.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub target: f64,
    pub min_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmfSolution {
    pub p: PowerCoefficients,
    pub min_se: f64,
    pub per_user_se: Vec<f64>,
    pub per_user_energy: Vec<f64>,
    pub per_user_input_power: Vec<f64>,
    pub ap_power: Vec<f64>,
    /// Total ascent steps over all bisection rounds.
    pub iterations: usize,
    pub feasible: bool,
    /// One row per bisection round: round index, tested target and best min-SE so far.
    pub trace: Vec<TraceRow>,
}

impl MmfProblem {
    pub fn new(
        st: StatTerms,
        sys: SystemParams,
        rect: RectifierParams,
        mode: TransmissionMode,
        eh_model: EhModel,
    ) -> Self {
        let rect = vec![rect; st.n_users];
        MmfProblem {
            st,
            sys,
            rect,
            mode,
            eh_model,
            ris_boost: None,
        }
    }

    pub fn with_boost(mut self, boost: Option<RisBoost>) -> Self {
        self.ris_boost = boost;
        self
    }

    pub fn validate(&self) -> Result<(), PowerControlError> {
        if self.rect.len() != self.st.n_users {
            return Err(PowerControlError::RectifierCount {
                got: self.rect.len(),
                expected: self.st.n_users,
            });
        }
        let scale = self.st.gain_cov.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let defect = self.st.hermitian_defect();
        if defect > 1e-9 * scale {
            return Err(PowerControlError::NotHermitian(defect));
        }
        Ok(())
    }

    /// Statistics with the RIS boost folded in, if any.
    pub fn effective_terms(&self) -> StatTerms {
        match &self.ris_boost {
            Some(b) => b.apply(&self.st),
            None => self.st.clone(),
        }
    }

    pub fn evaluate(&self, p: &PowerCoefficients) -> Result<Evaluation, PowerControlError> {
        Model::new(self).evaluate_p(p)
    }
}

/// Dense real form of a problem used inside the solver loops.
struct Model<'a> {
    prob: &'a MmfProblem,
    st: StatTerms,
    nj: usize,
    nu: usize,
    /// Real parts of the blocks `A_j^(m)`, `((j * J + m) * U + u) * U + u'`.
    blocks: Vec<f64>,
    signal: Vec<f64>,
    cross: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Model<'a> {
    fn new(prob: &'a MmfProblem) -> Self {
        let st = prob.effective_terms();
        let (nj, nu) = (st.n_users, st.n_aps);
        let signal = (0..nj).map(|j| st.uplink_signal(j).norm_sqr()).collect();
        let cross = (0..nj)
            .flat_map(|j| (0..nj).map(move |m| (j, m)))
            .map(|(j, m)| st.uplink_cross(j, m))
            .collect();
        let noise = (0..nj).map(|j| prob.sys.sigma2 * st.combiner_power(j)).collect();
        Model {
            prob,
            blocks: st.real_blocks(),
            st,
            nj,
            nu,
            signal,
            cross,
            noise,
        }
    }

    fn coherent(&self) -> bool {
        self.prob.mode == TransmissionMode::Coherent
    }

    /// Power coefficients for a solver variable.
    fn to_power(&self, x: &[f64]) -> PowerCoefficients {
        if self.coherent() {
            PowerCoefficients::from_amplitudes(self.nj, self.nu, x)
        } else {
            PowerCoefficients {
                n_users: self.nj,
                n_aps: self.nu,
                p: x.to_vec(),
            }
        }
    }

    fn variable_of(&self, p: &PowerCoefficients) -> Vec<f64> {
        if self.coherent() {
            p.amplitudes()
        } else {
            p.p.clone()
        }
    }

    fn input_power(&self, x: &[f64]) -> Vec<f64> {
        if self.coherent() {
            coherent_quadratic(x, &self.st)
        } else {
            let (nj, nu) = (self.nj, self.nu);
            (0..nj)
                .map(|j| {
                    let mut total = 0.0;
                    for m in 0..nj {
                        let b = (j * nj + m) * nu * nu;
                        for u in 0..nu {
                            total += x[m * nu + u] * self.blocks[b + u * nu + u];
                        }
                    }
                    total
                })
                .collect()
        }
    }

    fn evaluate_x(&self, x: &[f64]) -> Result<Evaluation, PowerControlError> {
        let sys = &self.prob.sys;
        let input_power = self.input_power(x);
        let energy: Vec<f64> = input_power
            .iter()
            .zip(&self.prob.rect)
            .map(|(i, r)| harvested_energy(*i, r, sys.delta_d, self.prob.eh_model))
            .collect();
        let uplink_power: Vec<f64> = energy
            .iter()
            .map(|e| uplink_power_from_energy(*e, sys.delta_u))
            .collect();
        let sinr = self.sinr(&uplink_power)?;
        let se = sinr.iter().map(|s| spectral_efficiency(*s, sys)).collect();
        Ok(Evaluation {
            input_power,
            energy,
            uplink_power,
            sinr,
            se,
        })
    }

    fn evaluate_p(&self, p: &PowerCoefficients) -> Result<Evaluation, PowerControlError> {
        self.evaluate_x(&self.variable_of(p))
    }

    fn denominator(&self, k: usize, p_ul: &[f64]) -> f64 {
        let nj = self.nj;
        let total: f64 = (0..nj).map(|m| p_ul[m] * self.cross[k * nj + m]).sum();
        total - p_ul[k] * self.signal[k] + self.noise[k]
    }

    fn sinr(&self, p_ul: &[f64]) -> Result<Vec<f64>, PowerControlError> {
        (0..self.nj)
            .map(|k| {
                let den = self.denominator(k, p_ul);
                if !(den > 0.0) {
                    return Err(PowerControlError::NonPositiveDenominator { user: k, value: den });
                }
                Ok(p_ul[k] * self.signal[k] / den)
            })
            .collect()
    }

    /// Gradient of user `k`'s SE with respect to the solver variable.
    fn gradient(&self, k: usize, x: &[f64], ev: &Evaluation) -> Vec<f64> {
        let (nj, nu) = (self.nj, self.nu);
        let sys = &self.prob.sys;
        let den = self.denominator(k, &ev.uplink_power);
        let s = ev.sinr[k];
        let dse = prelog(sys) / ((1.0 + s) * std::f64::consts::LN_2);
        // weight of each user's rectifier input power in dSE_k
        let weights: Vec<f64> = (0..nj)
            .map(|m| {
                let dsinr = if m == k {
                    (self.signal[k] - s * (self.cross[k * nj + k] - self.signal[k])) / den
                } else {
                    -s * self.cross[k * nj + m] / den
                };
                let slope =
                    harvested_energy_slope(ev.input_power[m], &self.prob.rect[m], sys.delta_d, self.prob.eh_model)
                        / sys.delta_u as f64;
                dse * dsinr * slope
            })
            .collect();
        let mut grad = vec![0.0; nj * nu];
        for (m, wm) in weights.iter().enumerate() {
            if *wm == 0.0 {
                continue;
            }
            for l in 0..nj {
                let b = (m * nj + l) * nu * nu;
                let gl = &mut grad[l * nu..(l + 1) * nu];
                if self.coherent() {
                    let xl = &x[l * nu..(l + 1) * nu];
                    for (r, g) in gl.iter_mut().enumerate() {
                        let row = &self.blocks[b + r * nu..b + (r + 1) * nu];
                        let dot: f64 = row.iter().zip(xl).map(|(a, q)| a * q).sum();
                        *g += 2.0 * wm * dot;
                    }
                } else {
                    for (u, g) in gl.iter_mut().enumerate() {
                        *g += wm * self.blocks[b + u * nu + u];
                    }
                }
            }
        }
        grad
    }

    /// Clamps negatives and maps each AP back onto its power budget:
    /// radial rescaling of the amplitudes in coherent mode, Euclidean
    /// projection onto the weighted simplex of powers otherwise.
    fn project(&self, x: &mut [f64]) {
        let (nj, nu) = (self.nj, self.nu);
        let rho = self.prob.sys.rho_d;
        for v in x.iter_mut() {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let mut column = vec![0.0; nj];
        let mut weights = vec![0.0; nj];
        for u in 0..nu {
            for j in 0..nj {
                column[j] = x[j * nu + u];
                weights[j] = self.st.precoder_power[j * nu + u];
            }
            if self.coherent() {
                let used: f64 = column.iter().zip(&weights).map(|(q, w)| q * q * w).sum();
                if used > rho {
                    let scale = (rho / used).sqrt();
                    column.iter_mut().for_each(|q| *q *= scale);
                }
            } else {
                project_weighted_simplex(&mut column, &weights, rho);
            }
            for j in 0..nj {
                x[j * nu + u] = column[j];
            }
        }
    }

    /// Upper bound on the smallest achievable SE: every user's SINR is below
    /// its noise-limited value at the largest rectifier input any feasible
    /// allocation can produce.
    fn se_upper_bound(&self) -> f64 {
        let (nj, nu) = (self.nj, self.nu);
        let sys = &self.prob.sys;
        let min_pw = self
            .st
            .precoder_power
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .max(f64::MIN_POSITIVE);
        let budget = sys.rho_d / min_pw;
        (0..nj)
            .map(|j| {
                let i_max = if self.coherent() {
                    // Gershgorin bound on each block, total squared amplitude <= U * budget
                    let worst = (0..nj)
                        .map(|m| {
                            let b = (j * nj + m) * nu * nu;
                            (0..nu)
                                .map(|r| {
                                    self.blocks[b + r * nu..b + (r + 1) * nu]
                                        .iter()
                                        .map(|a| a.abs())
                                        .sum::<f64>()
                                })
                                .fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max);
                    worst * nu as f64 * budget
                } else {
                    (0..nu)
                        .map(|u| {
                            (0..nj)
                                .map(|m| self.blocks[(j * nj + m) * nu * nu + u * nu + u])
                                .fold(0.0, f64::max)
                                * budget
                        })
                        .sum()
                };
                let e = harvested_energy(i_max, &self.prob.rect[j], sys.delta_d, self.prob.eh_model);
                let sinr = uplink_power_from_energy(e, sys.delta_u) * self.signal[j] / self.noise[j];
                spectral_efficiency(sinr, sys)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Euclidean projection of a nonnegative `x` onto `{y >= 0, sum w y <= budget}`.
fn project_weighted_simplex(x: &mut [f64], w: &[f64], budget: f64) {
    let used: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    if used <= budget {
        return;
    }
    // y_i = max(0, x_i - lambda w_i); entries leave the support in order of x_i / w_i
    let mut order: Vec<usize> = (0..x.len()).filter(|&i| w[i] > 0.0).collect();
    order.sort_by(|&a, &b| (x[b] / w[b]).total_cmp(&(x[a] / w[a])));
    let (mut wx, mut ww) = (0.0, 0.0);
    let mut lambda = 0.0;
    for (k, &i) in order.iter().enumerate() {
        wx += w[i] * x[i];
        ww += w[i] * w[i];
        lambda = (wx - budget) / ww;
        let next = order.get(k + 1).map_or(0.0, |&n| x[n] / w[n]);
        if lambda >= next {
            break;
        }
    }
    for (xi, wi) in x.iter_mut().zip(w) {
        *xi = (*xi - lambda * wi).max(0.0);
    }
    let after: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    if after > budget {
        let scale = budget / after;
        x.iter_mut().for_each(|v| *v *= scale);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Result of one ascent run.
struct Ascent {
    best_x: Vec<f64>,
    best: Evaluation,
    steps: usize,
}

/// Projected subgradient ascent on the minimum SE, stopping as soon as every
/// user reaches `target`.
fn ascend(
    model: &Model,
    start: &[f64],
    start_eval: &Evaluation,
    target: f64,
    settings: &SolverSettings,
) -> Result<Ascent, PowerControlError> {
    let mut best_x = start.to_vec();
    let mut best = start_eval.clone();
    if best.min_se() >= target {
        return Ok(Ascent { best_x, best, steps: 0 });
    }
    let scale = settings.step_scale * norm(start).max(model.prob.sys.rho_d.sqrt() * 1e-6);
    let mut x = start.to_vec();
    let mut ev = start_eval.clone();
    for k in 1..=settings.max_iters {
        let worst = argmin(&ev.se);
        let g = model.gradient(worst, &x, &ev);
        let gn = norm(&g);
        if !(gn > 0.0) || !gn.is_finite() {
            return Ok(Ascent {
                best_x,
                best,
                steps: k - 1,
            });
        }
        let step = scale / (k as f64).sqrt() / gn;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += step * gi;
        }
        model.project(&mut x);
        ev = model.evaluate_x(&x)?;
        if ev.min_se() > best.min_se() {
            best_x.clone_from(&x);
            best = ev.clone();
            if best.min_se() >= target {
                return Ok(Ascent { best_x, best, steps: k });
            }
        }
    }
    Ok(Ascent {
        best_x,
        best,
        steps: settings.max_iters,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn solution(
    prob: &MmfProblem,
    p: PowerCoefficients,
    ev: Evaluation,
    iterations: usize,
    trace: Vec<TraceRow>,
) -> MmfSolution {
    let ap_power = ap_transmit_power(&p, &prob.st.precoder_power);
    let within = check_power_constraint(&ap_power, prob.sys.rho_d).iter().all(|ok| *ok);
    let finite = ev.se.iter().chain(&ev.energy).all(|v| v.is_finite());
    MmfSolution {
        min_se: ev.min_se(),
        per_user_se: ev.se,
        per_user_energy: ev.energy,
        per_user_input_power: ev.input_power,
        ap_power,
        p,
        iterations,
        feasible: within && finite,
        trace,
    }
}

/// Every user gets `rho_d / J` from every AP.
pub fn equal_power_baseline(prob: &MmfProblem) -> Result<MmfSolution, PowerControlError> {
    prob.validate()?;
    let (nj, nu) = (prob.st.n_users, prob.st.n_aps);
    let rho = prob.sys.rho_d;
    let mut p = PowerCoefficients::uniform(nj, nu, rho / nj as f64);
    // absorbs precoders whose average power is not exactly one
    for (u, used) in ap_transmit_power(&p, &prob.st.precoder_power).into_iter().enumerate() {
        if used > rho {
            for j in 0..nj {
                p.p[j * nu + u] *= rho / used;
            }
        }
    }
    let ev = prob.evaluate(&p)?;
    Ok(solution(prob, p, ev, 0, Vec::new()))
}

pub fn mmf_solve(prob: &MmfProblem) -> Result<MmfSolution, PowerControlError> {
    mmf_solve_with(prob, &SolverSettings::default())
}

pub fn mmf_solve_with(prob: &MmfProblem, settings: &SolverSettings) -> Result<MmfSolution, PowerControlError> {
    let baseline = equal_power_baseline(prob)?;
    let model = Model::new(prob);
    let mut best_x = model.variable_of(&baseline.p);
    let mut best = model.evaluate_x(&best_x)?;
    let mut lo = best.min_se();
    let mut hi = model.se_upper_bound().max(lo);
    let mut iterations = 0;
    let mut trace = Vec::new();
    for round in 0..settings.max_rounds {
        if hi - lo <= settings.relative_tolerance * hi {
            break;
        }
        let target = 0.5 * (lo + hi);
        let run = ascend(&model, &best_x, &best, target, settings)?;
        iterations += run.steps;
        if run.best.min_se() > best.min_se() {
            best_x = run.best_x;
            best = run.best;
            lo = best.min_se();
        }
        // exact comparison: the absolute feasibility slack is coarse at these rate scales
        if best.min_se() < target {
            hi = target;
        }
        trace.push(TraceRow {
            iteration: round,
            target,
            min_se: best.min_se(),
        });
    }
    let p = model.to_power(&best_x);
    Ok(solution(prob, p, best, iterations, trace))
}

/// Writes `iteration,t,min_se` rows.
pub fn write_trace_csv<W: std::io::Write>(mut out: W, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "iteration,t,min_se")?;
    for row in trace {
        writeln!(out, "{},{:.16e},{:.16e}", row.iteration, row.target, row.min_se)?;
    }
    Ok(())
}
