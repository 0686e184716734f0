//! Downlink wireless power transfer.
//!
//! The APs beam energy with maximum-ratio precoders built from the channel
//! estimates. Everything the rectifier input power depends on is collected
//! once per setup into [`StatTerms`]: for receiving user `j`, energy symbol
//! `m` and APs `u, u'` it holds the sample average of
//! `(w_mu^H h_ju) (w_mu'^H h_ju)^*`. Input power is then a quadratic form in
//! the square-root power coefficients (coherent) or a linear form in the
//! power coefficients (non-coherent).

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{ChannelEstimate, ChannelRealization, LargeScaleParams};
use crate::config::{EhModel, RectifierParams, TransmissionMode};

#[derive(Debug, Error, PartialEq)]
pub enum WptError {
    #[error("estimate for user {user}, AP {ap} is zero in every realization")]
    ZeroEstimate { user: usize, ap: usize },
    #[error("no realizations supplied")]
    Empty,
}

/// Precoding vectors per realization, laid out like the channel estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingVectors {
    pub n_users: usize,
    pub n_aps: usize,
    pub n_antennas: usize,
    pub per_realization: Vec<Vec<Complex64>>,
}

impl PrecodingVectors {
    /// Sample average of `||w_ju||^2` per pair.
    pub fn mean_power(&self) -> Vec<f64> {
        let n = self.n_antennas;
        let mut acc = vec![0.0; self.n_users * self.n_aps];
        for w in &self.per_realization {
            for (p, a) in acc.iter_mut().enumerate() {
                *a += w[p * n..(p + 1) * n].iter().map(|x| x.norm_sqr()).sum::<f64>();
            }
        }
        let count = self.per_realization.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        acc
    }
}

/// MRT precoders `w = hhat / sqrt(E{||hhat||^2})` so each pair carries unit
/// average precoder power.
pub fn mrt_precoders(estimates: &[ChannelEstimate], ls: &LargeScaleParams) -> Result<PrecodingVectors, WptError> {
    if estimates.is_empty() {
        return Err(WptError::Empty);
    }
    let n = ls.n_antennas;
    let pairs = ls.n_users * ls.n_aps;
    let mut power = vec![0.0; pairs];
    for e in estimates {
        for (p, acc) in power.iter_mut().enumerate() {
            *acc += e.hhat[p * n..(p + 1) * n].iter().map(|x| x.norm_sqr()).sum::<f64>();
        }
    }
    let mut scale = Vec::with_capacity(pairs);
    for (p, acc) in power.iter().enumerate() {
        let mean = acc / estimates.len() as f64;
        if !(mean > 0.0) {
            return Err(WptError::ZeroEstimate {
                user: p / ls.n_aps,
                ap: p % ls.n_aps,
            });
        }
        scale.push(1.0 / mean.sqrt());
    }
    let per_realization = estimates
        .iter()
        .map(|e| e.hhat.iter().enumerate().map(|(i, h)| h * scale[i / n]).collect())
        .collect();
    Ok(PrecodingVectors {
        n_users: ls.n_users,
        n_aps: ls.n_aps,
        n_antennas: n,
        per_realization,
    })
}

/// Downlink power coefficients `p_ju`, user-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerCoefficients {
    pub n_users: usize,
    pub n_aps: usize,
    pub p: Vec<f64>,
}

impl PowerCoefficients {
    pub fn zeros(n_users: usize, n_aps: usize) -> Self {
        PowerCoefficients {
            n_users,
            n_aps,
            p: vec![0.0; n_users * n_aps],
        }
    }

    pub fn uniform(n_users: usize, n_aps: usize, value: f64) -> Self {
        PowerCoefficients {
            n_users,
            n_aps,
            p: vec![value; n_users * n_aps],
        }
    }

    #[inline]
    pub fn get(&self, j: usize, u: usize) -> f64 {
        self.p[j * self.n_aps + u]
    }

    /// Square-root amplitudes `q_ju = sqrt(p_ju)`.
    pub fn amplitudes(&self) -> Vec<f64> {
        self.p.iter().map(|p| p.max(0.0).sqrt()).collect()
    }

    pub fn from_amplitudes(n_users: usize, n_aps: usize, q: &[f64]) -> Self {
        PowerCoefficients {
            n_users,
            n_aps,
            p: q.iter().map(|q| q * q).collect(),
        }
    }
}

/// Average transmit power of each AP, `sum_j p_ju E{||w_ju||^2}`.
pub fn ap_transmit_power(p: &PowerCoefficients, precoder_power: &[f64]) -> Vec<f64> {
    assert_eq!(p.p.len(), precoder_power.len(), "dimension mismatch");
    (0..p.n_aps)
        .map(|u| {
            (0..p.n_users)
                .map(|j| p.get(j, u) * precoder_power[j * p.n_aps + u])
                .sum()
        })
        .collect()
}

/// Absolute slack allowed on the per-AP power limit.
pub const POWER_TOLERANCE: f64 = 1e-9;

pub fn check_power_constraint(ap_power: &[f64], rho_d: f64) -> Vec<bool> {
    ap_power.iter().map(|p| *p <= rho_d + POWER_TOLERANCE).collect()
}

/// Monte Carlo moments of the effective scalar gains `g_jmu = w_mu^H h_ju`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatTerms {
    pub n_users: usize,
    pub n_aps: usize,
    /// `E{g_jmu g_jmu'^*}` at `((j * J + m) * U + u) * U + u'`; Hermitian in `(u, u')`.
    pub gain_cov: Vec<Complex64>,
    /// `E{g_jmu}` at `(j * J + m) * U + u`.
    pub gain_mean: Vec<Complex64>,
    /// `E{||w_ju||^2}` per pair.
    pub precoder_power: Vec<f64>,
}

impl StatTerms {
    #[inline]
    fn block_index(&self, j: usize, m: usize) -> usize {
        (j * self.n_users + m) * self.n_aps * self.n_aps
    }

    /// The `U x U` block `A_j^(m)` in row-major order.
    pub fn block(&self, j: usize, m: usize) -> &[Complex64] {
        let start = self.block_index(j, m);
        &self.gain_cov[start..start + self.n_aps * self.n_aps]
    }

    pub fn mean(&self, j: usize, m: usize, u: usize) -> Complex64 {
        self.gain_mean[(j * self.n_users + m) * self.n_aps + u]
    }

    /// `E{|g_jmu|^2}`, the non-coherent coupling from AP `u`'s symbol for
    /// user `m` into user `j`.
    pub fn power_gain(&self, j: usize, m: usize, u: usize) -> f64 {
        self.block(j, m)[u * self.n_aps + u].re
    }

    /// Real parts of the blocks, which is all a real amplitude vector sees.
    pub fn real_blocks(&self) -> Vec<f64> {
        self.gain_cov.iter().map(|c| c.re).collect()
    }

    /// Uplink MR first moment `E{v_j^H h_j}`, where `v_j` stacks `w_ju` over APs.
    pub fn uplink_signal(&self, j: usize) -> Complex64 {
        (0..self.n_aps).map(|u| self.mean(j, j, u)).sum()
    }

    /// Uplink second moment `E{|v_j^H h_m|^2}` with combiner of user `j`
    /// and channel of user `m`.
    pub fn uplink_cross(&self, j: usize, m: usize) -> f64 {
        // v_j^H h_m = sum_u w_ju^H h_mu = sum_u g_{m j u}
        self.block(m, j).iter().map(|c| c.re).sum()
    }

    /// `E{||v_j||^2}`.
    pub fn combiner_power(&self, j: usize) -> f64 {
        self.precoder_power[j * self.n_aps..(j + 1) * self.n_aps].iter().sum()
    }

    /// Largest deviation from Hermitian symmetry over all blocks.
    pub fn hermitian_defect(&self) -> f64 {
        let u = self.n_aps;
        let mut worst: f64 = 0.0;
        for b in self.gain_cov.chunks_exact(u * u) {
            for r in 0..u {
                for c in 0..u {
                    worst = worst.max((b[r * u + c] - b[c * u + r].conj()).norm());
                }
            }
        }
        worst
    }
}

/// Sample averages over the ensemble of every moment in [`StatTerms`].
pub fn stat_terms(
    ensemble: &[ChannelRealization],
    w: &PrecodingVectors,
    ls: &LargeScaleParams,
) -> Result<StatTerms, WptError> {
    if ensemble.is_empty() || ensemble.len() != w.per_realization.len() {
        return Err(WptError::Empty);
    }
    let (nj, nu, na) = (ls.n_users, ls.n_aps, ls.n_antennas);
    let mut cov = vec![Complex64::new(0.0, 0.0); nj * nj * nu * nu];
    let mut mean = vec![Complex64::new(0.0, 0.0); nj * nj * nu];
    let mut g = vec![Complex64::new(0.0, 0.0); nu];
    for (real, wr) in ensemble.iter().zip(&w.per_realization) {
        for j in 0..nj {
            for m in 0..nj {
                for (u, gu) in g.iter_mut().enumerate() {
                    let h = real.h(ls, j, u);
                    let wv = &wr[ls.pair(m, u) * na..(ls.pair(m, u) + 1) * na];
                    *gu = wv.iter().zip(h).map(|(a, b)| a.conj() * b).sum();
                }
                let base = (j * nj + m) * nu;
                for u in 0..nu {
                    mean[base + u] += g[u];
                    let row = &mut cov[(base + u) * nu..(base + u + 1) * nu];
                    let gu = g[u];
                    for (c, gv) in row.iter_mut().zip(&g) {
                        *c += gu * gv.conj();
                    }
                }
            }
        }
    }
    let count = ensemble.len() as f64;
    for c in cov.iter_mut() {
        *c /= count;
    }
    for c in mean.iter_mut() {
        *c /= count;
    }
    // Hermitian symmetrization of each block.
    for block in cov.chunks_exact_mut(nu * nu) {
        for r in 0..nu {
            block[r * nu + r].im = 0.0;
            for c in r + 1..nu {
                let avg = (block[r * nu + c] + block[c * nu + r].conj()) * 0.5;
                block[r * nu + c] = avg;
                block[c * nu + r] = avg.conj();
            }
        }
    }
    Ok(StatTerms {
        n_users: nj,
        n_aps: nu,
        gain_cov: cov,
        gain_mean: mean,
        precoder_power: w.mean_power(),
    })
}

/// `I_j = sum_m q_m^T A_j^(m) q_m` for amplitude vector `q` (user-major).
pub fn coherent_quadratic(q: &[f64], st: &StatTerms) -> Vec<f64> {
    let (nj, nu) = (st.n_users, st.n_aps);
    (0..nj)
        .map(|j| {
            let mut total = 0.0;
            for m in 0..nj {
                let qm = &q[m * nu..(m + 1) * nu];
                let block = st.block(j, m);
                for (r, qr) in qm.iter().enumerate() {
                    if *qr == 0.0 {
                        continue;
                    }
                    let row = &block[r * nu..(r + 1) * nu];
                    let dot: f64 = row.iter().zip(qm).map(|(a, qc)| a.re * qc).sum();
                    total += qr * dot;
                }
            }
            total.max(0.0)
        })
        .collect()
}

/// Rectifier input power when every AP sends the same energy symbol per user.
pub fn input_power_coherent(p: &PowerCoefficients, st: &StatTerms) -> Vec<f64> {
    coherent_quadratic(&p.amplitudes(), st)
}

/// Rectifier input power with independent energy symbols per AP.
pub fn input_power_noncoherent(p: &PowerCoefficients, st: &StatTerms) -> Vec<f64> {
    let (nj, nu) = (st.n_users, st.n_aps);
    (0..nj)
        .map(|j| {
            (0..nj)
                .flat_map(|m| (0..nu).map(move |u| (m, u)))
                .map(|(m, u)| p.get(m, u) * st.power_gain(j, m, u))
                .sum()
        })
        .collect()
}

pub fn input_power(p: &PowerCoefficients, st: &StatTerms, mode: TransmissionMode) -> Vec<f64> {
    match mode {
        TransmissionMode::Coherent => input_power_coherent(p, st),
        TransmissionMode::NonCoherent => input_power_noncoherent(p, st),
    }
}

/// Harvested energy over the downlink phase, in sample-watts.
pub fn harvested_energy(input_w: f64, rect: &RectifierParams, delta_d: usize, model: EhModel) -> f64 {
    let dd = delta_d as f64;
    match model {
        EhModel::NonLinear => dd * rect.a * input_w / (rect.b * input_w + rect.c),
        EhModel::Linear => dd * rect.a * input_w / rect.c,
    }
}

/// Derivative of [`harvested_energy`] with respect to the input power.
pub fn harvested_energy_slope(input_w: f64, rect: &RectifierParams, delta_d: usize, model: EhModel) -> f64 {
    let dd = delta_d as f64;
    match model {
        EhModel::NonLinear => {
            let den = rect.b * input_w + rect.c;
            dd * rect.a * rect.c / (den * den)
        }
        EhModel::Linear => dd * rect.a / rect.c,
    }
}

/// Per-user rectifier input and harvested energy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub input_power_w: Vec<f64>,
    pub harvested: Vec<f64>,
}

impl EnergyReport {
    pub fn new(input_power_w: Vec<f64>, rect: &[RectifierParams], delta_d: usize, model: EhModel) -> Self {
        let harvested = input_power_w
            .iter()
            .zip(rect)
            .map(|(i, r)| harvested_energy(*i, r, delta_d, model))
            .collect();
        EnergyReport {
            input_power_w,
            harvested,
        }
    }
}
