//! AP-user channels: large-scale statistics, Rician small-scale draws with an
//! unknown LOS phase, and pilot-based LMMSE estimation.
//!
//! All per-pair arrays are flattened user-major: pair `(j, u)` lives at
//! `j * n_aps + u`, and antenna `n` of that pair at `(j * n_aps + u) * n_antennas + n`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::config::SystemParams;
use crate::geometry::{distance_3d, NetworkLayout, Position};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("pilot covariance for AP {ap}, pilot {pilot} is singular")]
    SingularCovariance { ap: usize, pilot: usize },
    #[error("at least one realization is required")]
    NoRealizations,
    #[error("malformed channel dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Large-scale gain in dB at distance `d` meters. Distances below 1 m are
/// clamped to the 1 m reference.
pub fn path_loss_db(d: f64) -> f64 {
    -30.5 - 36.7 * d.max(1.0).log10()
}

/// Rician factor in dB at distance `d` meters.
pub fn rician_factor_db(d: f64) -> f64 {
    13.0 - 0.03 * d
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Unit-modulus half-wavelength ULA response. The array lies along the y
/// axis so the phase progression is set by the direction cosine `dy / d`,
/// which folds azimuth and elevation into a single angle.
pub fn steering_vector(from: Position, to: Position, n_antennas: usize) -> Vec<Complex64> {
    let d = distance_3d(from, to);
    let cosine = if d > 0.0 { (to.y - from.y) / d } else { 0.0 };
    (0..n_antennas)
        .map(|n| Complex64::from_polar(1.0, PI * n as f64 * cosine))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LargeScaleParams {
    pub n_users: usize,
    pub n_aps: usize,
    pub n_antennas: usize,
    /// Linear channel gain per pair.
    pub beta: Vec<f64>,
    /// Linear Rician factor per pair.
    pub kappa: Vec<f64>,
    /// Per-antenna NLOS variance per pair.
    pub gamma: Vec<f64>,
    /// Deterministic LOS vectors.
    pub hbar: Vec<Complex64>,
    /// Pilot assigned to each user.
    pub pilot_index: Vec<usize>,
}

impl LargeScaleParams {
    #[inline]
    pub fn pair(&self, j: usize, u: usize) -> usize {
        j * self.n_aps + u
    }

    pub fn hbar(&self, j: usize, u: usize) -> &[Complex64] {
        let start = self.pair(j, u) * self.n_antennas;
        &self.hbar[start..start + self.n_antennas]
    }

    /// Builds statistics from explicit per-pair gains, Rician factors and
    /// steering vectors. `kappa = inf` gives a pure LOS channel.
    pub fn from_parts(
        n_users: usize,
        n_aps: usize,
        n_antennas: usize,
        beta: Vec<f64>,
        kappa: Vec<f64>,
        steering: &[Vec<Complex64>],
        n_pilots: usize,
    ) -> Self {
        let pairs = n_users * n_aps;
        assert_eq!(beta.len(), pairs);
        assert_eq!(kappa.len(), pairs);
        assert_eq!(steering.len(), pairs);
        let mut gamma = Vec::with_capacity(pairs);
        let mut hbar = Vec::with_capacity(pairs * n_antennas);
        for p in 0..pairs {
            let (los_share, g) = if kappa[p].is_infinite() {
                (1.0, 0.0)
            } else {
                (kappa[p] / (kappa[p] + 1.0), beta[p] / (kappa[p] + 1.0))
            };
            gamma.push(g);
            let amp = (los_share * beta[p]).sqrt();
            assert_eq!(steering[p].len(), n_antennas);
            hbar.extend(steering[p].iter().map(|a| a * amp));
        }
        LargeScaleParams {
            n_users,
            n_aps,
            n_antennas,
            beta,
            kappa,
            gamma,
            hbar,
            pilot_index: (0..n_users).map(|j| j % n_pilots.max(1)).collect(),
        }
    }
}

/// Path loss, shadowing and LOS geometry for every user-AP pair.
pub fn large_scale<R: Rng + ?Sized>(
    layout: &NetworkLayout,
    sys: &SystemParams,
    n_antennas: usize,
    rng: &mut R,
) -> LargeScaleParams {
    let n_users = layout.user_positions.len();
    let n_aps = layout.ap_positions.len();
    let shadow = Normal::new(0.0, sys.sigma_sf_los).expect("validated shadowing std");
    let mut beta = Vec::with_capacity(n_users * n_aps);
    let mut kappa = Vec::with_capacity(n_users * n_aps);
    let mut steering = Vec::with_capacity(n_users * n_aps);
    for user in &layout.user_positions {
        for ap in &layout.ap_positions {
            let d = distance_3d(*ap, *user);
            let shadow_db: f64 = shadow.sample(rng);
            beta.push(db_to_linear(path_loss_db(d) + shadow_db));
            kappa.push(db_to_linear(rician_factor_db(d)));
            steering.push(steering_vector(*ap, *user, n_antennas));
        }
    }
    LargeScaleParams::from_parts(n_users, n_aps, n_antennas, beta, kappa, &steering, sys.delta_p)
}

/// One small-scale draw of every channel in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Complex64>,
    /// LOS phase per pair, in `[0, 2pi)`.
    pub phi: Vec<f64>,
}

impl ChannelRealization {
    pub fn h(&self, ls: &LargeScaleParams, j: usize, u: usize) -> &[Complex64] {
        let start = ls.pair(j, u) * ls.n_antennas;
        &self.h[start..start + ls.n_antennas]
    }

    /// The NLOS component, recovered as `h - e^{i phi} hbar`.
    pub fn nlos(&self, ls: &LargeScaleParams, j: usize, u: usize) -> Vec<Complex64> {
        let rot = Complex64::from_polar(1.0, self.phi[ls.pair(j, u)]);
        self.h(ls, j, u)
            .iter()
            .zip(ls.hbar(j, u))
            .map(|(h, hb)| h - rot * hb)
            .collect()
    }
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
#[inline]
pub(crate) fn cn<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub fn draw_channels<R: Rng + ?Sized>(
    ls: &LargeScaleParams,
    n_realizations: usize,
    rng: &mut R,
) -> Result<Vec<ChannelRealization>, ChannelError> {
    if n_realizations == 0 {
        return Err(ChannelError::NoRealizations);
    }
    let pairs = ls.n_users * ls.n_aps;
    let n = ls.n_antennas;
    Ok((0..n_realizations)
        .map(|_| {
            let mut h = Vec::with_capacity(pairs * n);
            let mut phi = Vec::with_capacity(pairs);
            for p in 0..pairs {
                let angle = rng.random::<f64>() * 2.0 * PI;
                let rot = Complex64::from_polar(1.0, angle);
                phi.push(angle);
                let g = ls.gamma[p];
                for hb in &ls.hbar[p * n..(p + 1) * n] {
                    let scatter = if g > 0.0 { cn(rng, g) } else { Complex64::new(0.0, 0.0) };
                    h.push(rot * hb + scatter);
                }
            }
            ChannelRealization { h, phi }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub hhat: Vec<Complex64>,
}

impl ChannelEstimate {
    pub fn hhat(&self, ls: &LargeScaleParams, j: usize, u: usize) -> &[Complex64] {
        let start = ls.pair(j, u) * ls.n_antennas;
        &self.hhat[start..start + ls.n_antennas]
    }
}

#[derive(Debug, Clone)]
pub struct Estimates {
    pub per_realization: Vec<ChannelEstimate>,
    /// Trace of the estimation error covariance per pair.
    pub error_covariance_trace: Vec<f64>,
}

/// Phase-unaware covariance `hbar hbar^H + gamma I` of a pair.
fn pair_covariance(ls: &LargeScaleParams, j: usize, u: usize) -> DMatrix<Complex64> {
    let hb = DVector::from_column_slice(ls.hbar(j, u));
    let mut r = &hb * hb.adjoint();
    let g = ls.gamma[ls.pair(j, u)];
    for n in 0..ls.n_antennas {
        r[(n, n)] += Complex64::new(g, 0.0);
    }
    r
}

/// LMMSE channel estimates from orthonormal pilots reused round-robin.
///
/// Each AP correlates its received pilot block with every pilot; users that
/// share a pilot contaminate each other. The estimator treats the LOS term
/// as zero-mean with covariance `hbar hbar^H` because its phase is unknown.
pub fn lmmse_estimate<R: Rng + ?Sized>(
    ensemble: &[ChannelRealization],
    ls: &LargeScaleParams,
    sys: &SystemParams,
    rng: &mut R,
) -> Result<Estimates, ChannelError> {
    let n = ls.n_antennas;
    let (n_users, n_aps) = (ls.n_users, ls.n_aps);
    let pilot_gain = (sys.delta_p as f64) * sys.rho_p;
    let amp = pilot_gain.sqrt();
    let n_pilots = ls.pilot_index.iter().max().map_or(0, |m| m + 1);

    // Per pair estimator matrix sqrt(a) R Q^-1, stored row-major.
    let mut filters = vec![Complex64::new(0.0, 0.0); n_users * n_aps * n * n];
    let mut error_trace = vec![0.0; n_users * n_aps];
    for u in 0..n_aps {
        let covs: Vec<_> = (0..n_users).map(|j| pair_covariance(ls, j, u)).collect();
        for t in 0..n_pilots {
            let sharing: Vec<usize> = (0..n_users).filter(|&j| ls.pilot_index[j] == t).collect();
            if sharing.is_empty() {
                continue;
            }
            let mut q = DMatrix::<Complex64>::identity(n, n) * Complex64::new(sys.sigma2, 0.0);
            for &m in &sharing {
                q += &covs[m] * Complex64::new(pilot_gain, 0.0);
            }
            let q_inv = q
                .cholesky()
                .ok_or(ChannelError::SingularCovariance { ap: u, pilot: t })?
                .inverse();
            for &j in &sharing {
                let rq = &covs[j] * &q_inv;
                let g = &rq * Complex64::new(amp, 0.0);
                let err = &covs[j] - &rq * &covs[j] * Complex64::new(pilot_gain, 0.0);
                error_trace[ls.pair(j, u)] = err.trace().re.max(0.0);
                let base = ls.pair(j, u) * n * n;
                for r in 0..n {
                    for c in 0..n {
                        filters[base + r * n + c] = g[(r, c)];
                    }
                }
            }
        }
    }

    let mut per_realization = Vec::with_capacity(ensemble.len());
    let mut y = vec![Complex64::new(0.0, 0.0); n_pilots * n];
    for real in ensemble {
        let mut hhat = vec![Complex64::new(0.0, 0.0); n_users * n_aps * n];
        for u in 0..n_aps {
            for v in y.iter_mut() {
                *v = cn(rng, sys.sigma2);
            }
            for j in 0..n_users {
                let t = ls.pilot_index[j];
                for (yv, hv) in y[t * n..(t + 1) * n].iter_mut().zip(real.h(ls, j, u)) {
                    *yv += hv * amp;
                }
            }
            for j in 0..n_users {
                let t = ls.pilot_index[j];
                let yt = &y[t * n..(t + 1) * n];
                let base = ls.pair(j, u);
                let f = &filters[base * n * n..(base + 1) * n * n];
                for r in 0..n {
                    hhat[base * n + r] = f[r * n..(r + 1) * n].iter().zip(yt).map(|(a, b)| a * b).sum();
                }
            }
        }
        per_realization.push(ChannelEstimate { hhat });
    }
    Ok(Estimates {
        per_realization,
        error_covariance_trace: error_trace,
    })
}

const DUMP_MAGIC: &[u8; 8] = b"CUREchn1";

/// Writes the ensemble as little-endian complex64 pairs after a 16-byte
/// header: magic, then `u16` AP, user and antenna counts and a zero `u16`.
/// Samples are ordered realization, user, AP, antenna.
pub fn write_channel_dump<W: Write>(
    mut out: W,
    ls: &LargeScaleParams,
    ensemble: &[ChannelRealization],
) -> Result<(), ChannelError> {
    let count = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| ChannelError::BadDump(format!("{what} count {v} exceeds u16")))
    };
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&count(ls.n_aps, "AP")?.to_le_bytes())?;
    out.write_all(&count(ls.n_users, "user")?.to_le_bytes())?;
    out.write_all(&count(ls.n_antennas, "antenna")?.to_le_bytes())?;
    out.write_all(&0u16.to_le_bytes())?;
    for real in ensemble {
        for h in &real.h {
            out.write_all(&(h.re as f32).to_le_bytes())?;
            out.write_all(&(h.im as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Dimensions and samples read back from a channel dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDump {
    pub n_aps: usize,
    pub n_users: usize,
    pub n_antennas: usize,
    /// One vector of `n_users * n_aps * n_antennas` samples per realization.
    pub realizations: Vec<Vec<num_complex::Complex32>>,
}

pub fn read_channel_dump<Rd: Read>(mut input: Rd) -> Result<ChannelDump, ChannelError> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..8] != DUMP_MAGIC {
        return Err(ChannelError::BadDump("bad magic".into()));
    }
    let field = |i: usize| u16::from_le_bytes([header[8 + 2 * i], header[9 + 2 * i]]) as usize;
    let (n_aps, n_users, n_antennas) = (field(0), field(1), field(2));
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let per = n_aps * n_users * n_antennas * 8;
    if per == 0 || body.len() % per != 0 {
        return Err(ChannelError::BadDump(format!(
            "payload of {} bytes is not a whole number of realizations",
            body.len()
        )));
    }
    let realizations = body
        .chunks_exact(per)
        .map(|chunk| {
            chunk
                .chunks_exact(8)
                .map(|b| {
                    num_complex::Complex32::new(
                        f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                        f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    )
                })
                .collect()
        })
        .collect();
    Ok(ChannelDump {
        n_aps,
        n_users,
        n_antennas,
        realizations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{grid_aps, place_users};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys() -> SystemParams {
        SystemParams::new(200, 5, 25, 1e-7, 0.625, 2.5e-13, 3.4e9, 3.0, 4.0).unwrap()
    }

    /// Single pair with a prescribed LOS vector and NLOS variance.
    fn single(hbar: Vec<Complex64>, gamma: f64) -> LargeScaleParams {
        let n = hbar.len();
        let los: f64 = hbar.iter().map(|h| h.norm_sqr()).sum();
        LargeScaleParams {
            n_users: 1,
            n_aps: 1,
            n_antennas: n,
            beta: vec![los / n as f64 + gamma],
            kappa: vec![if gamma == 0.0 {
                f64::INFINITY
            } else {
                los / (n as f64 * gamma)
            }],
            gamma: vec![gamma],
            hbar,
            pilot_index: vec![0],
        }
    }

    fn layout(seed: u64) -> NetworkLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkLayout {
            coverage_side: 100.0,
            ap_positions: grid_aps(4, 100.0, 25.0).unwrap(),
            ris_positions: vec![],
            user_positions: place_users(3, 100.0, 1.0, &mut rng).unwrap(),
        }
    }

    #[test]
    fn path_loss_reference() {
        let beta = db_to_linear(path_loss_db(1.0));
        assert!((beta - 10f64.powf(-3.05)).abs() < 1e-15);
        assert!((beta - 8.91e-4).abs() / 8.91e-4 < 1e-3);
    }

    #[test]
    fn power_split_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ls = large_scale(&layout(1), &sys(), 4, &mut rng);
        for p in 0..ls.beta.len() {
            let los: f64 = ls.hbar[p * 4..(p + 1) * 4].iter().map(|h| h.norm_sqr()).sum();
            let total = los + 4.0 * ls.gamma[p];
            assert!((total - 4.0 * ls.beta[p]).abs() <= 1e-9 * 4.0 * ls.beta[p]);
            assert!(ls.beta[p] > 0.0 && ls.gamma[p] >= 0.0);
        }
    }

    #[test]
    fn infinite_rician_factor_is_pure_los() {
        let steer = vec![vec![Complex64::new(1.0, 0.0); 2]];
        let ls = LargeScaleParams::from_parts(1, 1, 2, vec![1e-6], vec![f64::INFINITY], &steer, 5);
        assert_eq!(ls.gamma[0], 0.0);
        let big = LargeScaleParams::from_parts(1, 1, 2, vec![1e-6], vec![1e12], &steer, 5);
        assert!(big.gamma[0] < 1e-17);
    }

    #[test]
    fn pilots_round_robin() {
        let steer = vec![vec![Complex64::new(1.0, 0.0)]; 7];
        let ls = LargeScaleParams::from_parts(7, 1, 1, vec![1.0; 7], vec![1.0; 7], &steer, 5);
        assert_eq!(ls.pilot_index, vec![0, 1, 2, 3, 4, 0, 1]);
    }

    #[test]
    fn pure_los_keeps_magnitudes() {
        let hbar = vec![Complex64::new(0.3, 0.4), Complex64::new(-1.0, 0.2)];
        let ls = single(hbar.clone(), 0.0);
        let ens = draw_channels(&ls, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for r in &ens {
            for (h, hb) in r.h.iter().zip(&hbar) {
                assert!((h.norm() - hb.norm()).abs() < 1e-12);
            }
            assert!(r.phi[0] >= 0.0 && r.phi[0] < 2.0 * PI);
        }
        assert!(draw_channels(&ls, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn realization_decomposes() {
        let ls = large_scale(&layout(2), &sys(), 3, &mut ChaCha8Rng::seed_from_u64(2));
        let ens = draw_channels(&ls, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r = &ens[1];
        let nl = r.nlos(&ls, 2, 3);
        let rot = Complex64::from_polar(1.0, r.phi[ls.pair(2, 3)]);
        for (n, h) in r.h(&ls, 2, 3).iter().enumerate() {
            assert!((h - (rot * ls.hbar(2, 3)[n] + nl[n])).norm() < 1e-18);
        }
    }

    #[test]
    fn channel_draws_are_deterministic() {
        let ls = large_scale(&layout(4), &sys(), 4, &mut ChaCha8Rng::seed_from_u64(9));
        let a = draw_channels(&ls, 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = draw_channels(&ls, 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_single_user_estimate_recovers_channel() {
        let hbar = vec![Complex64::new(1e-4, 2e-4), Complex64::new(-3e-4, 1e-4)];
        let ls = single(hbar, 0.0);
        let mut s = sys();
        s.sigma2 = 1e-22;
        let ens = draw_channels(&ls, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let est = lmmse_estimate(&ens, &ls, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // only the pilot noise, scaled back by the pilot amplitude, remains
        let noise = (s.sigma2 / (s.delta_p as f64 * s.rho_p)).sqrt();
        for (r, e) in ens.iter().zip(&est.per_realization) {
            for (h, hh) in r.h.iter().zip(&e.hhat) {
                assert!((h - hh).norm() < 6.0 * noise, "{h} vs {hh}");
                assert!(noise < 1e-3 * h.norm());
            }
        }
    }

    #[test]
    fn no_pilot_power_means_zero_estimates() {
        let ls = large_scale(&layout(3), &sys(), 2, &mut ChaCha8Rng::seed_from_u64(1));
        let ens = draw_channels(&ls, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut s = sys();
        s.rho_p = 0.0;
        let est = lmmse_estimate(&ens, &ls, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(est
            .per_realization
            .iter()
            .all(|e| e.hhat.iter().all(|h| *h == Complex64::new(0.0, 0.0))));
        // with no noise either, the pilot covariance is singular
        s.sigma2 = 0.0;
        assert!(matches!(
            lmmse_estimate(&ens, &ls, &s, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(ChannelError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn error_trace_bounded_by_channel_power() {
        let ls = large_scale(&layout(6), &sys(), 4, &mut ChaCha8Rng::seed_from_u64(6));
        let ens = draw_channels(&ls, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let est = lmmse_estimate(&ens, &ls, &sys(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for (p, tr) in est.error_covariance_trace.iter().enumerate() {
            assert!(*tr >= 0.0 && *tr <= 4.0 * ls.beta[p] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn dump_round_trip() {
        let ls = large_scale(&layout(8), &sys(), 2, &mut ChaCha8Rng::seed_from_u64(8));
        let ens = draw_channels(&ls, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut buf = Vec::new();
        write_channel_dump(&mut buf, &ls, &ens).unwrap();
        assert_eq!(&buf[..8], b"CUREchn1");
        assert_eq!(buf.len(), 16 + 3 * 3 * 4 * 2 * 8);
        let dump = read_channel_dump(&buf[..]).unwrap();
        assert_eq!((dump.n_aps, dump.n_users, dump.n_antennas), (4, 3, 2));
        assert_eq!(dump.realizations.len(), 3);
        assert_eq!(dump.realizations[2][5].re, ens[2].h[5].re as f32);
        assert!(read_channel_dump(&buf[..20]).is_err());
    }
}
