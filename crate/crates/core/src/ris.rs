//! Reconfigurable intelligent surfaces.
//!
//! Each panel reflects with a fixed amplitude `alpha` and per-element phase
//! shifts. AP-RIS and RIS-user hops are deterministic line-of-sight links
//! that use the same distance law as the direct channels, without shadowing.
//! With phases matched to the direct link every reflected path adds in
//! phase, giving the effective amplitude `sqrt(beta_ju) + N alpha sqrt(beta_ris)`.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use num_complex::Complex64;

use crate::channel::{db_to_linear, path_loss_db, LargeScaleParams};
use crate::config::{SystemParams, TransmissionMode};
use crate::geometry::{distance_3d, NetworkLayout, Position};
use crate::wpt::{input_power, PowerCoefficients, StatTerms};

#[derive(Debug, Clone, PartialEq)]
pub struct RisPanel {
    pub n_elements: usize,
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub position: Position,
}

/// The two deterministic hops through one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadedChannel {
    pub h_ur: Vec<Complex64>,
    pub h_jr: Vec<Complex64>,
    pub beta_ur: f64,
    pub beta_jr: f64,
    /// Square of the mean per-element product magnitude.
    pub beta_ris: f64,
}

/// Hop gain (linear) for a deterministic link of length `d`.
pub fn hop_gain(d: f64) -> f64 {
    db_to_linear(path_loss_db(d))
}

/// Element centers on a half-wavelength row along x, centered on the panel.
pub fn element_positions(center: Position, n_elements: usize, wavelength: f64) -> Vec<Position> {
    let mid = (n_elements as f64 - 1.0) / 2.0;
    (0..n_elements)
        .map(|n| Position::new(center.x + (n as f64 - mid) * wavelength / 2.0, center.y, center.z))
        .collect()
}

fn hop(beta: f64, endpoint: Position, elements: &[Position], wavelength: f64) -> Vec<Complex64> {
    let amp = beta.sqrt();
    elements
        .iter()
        .map(|e| Complex64::from_polar(amp, -TAU * distance_3d(endpoint, *e) / wavelength))
        .collect()
}

/// `((1/N) sum_n |[h_ur]_n [h_jr]_n|)^2`. With no elements this falls back
/// to the product of the hop gains, which is what any element count gives
/// for unit-modulus element responses.
pub fn cascaded_gain(h_ur: &[Complex64], h_jr: &[Complex64], beta_ur: f64, beta_jr: f64) -> f64 {
    if h_ur.is_empty() {
        return beta_ur * beta_jr;
    }
    let mean = h_ur.iter().zip(h_jr).map(|(a, b)| (a * b).norm()).sum::<f64>() / h_ur.len() as f64;
    mean * mean
}

/// Builds both hops for explicit hop gains.
pub fn cascaded_with_gains(
    ap: Position,
    panel_center: Position,
    user: Position,
    n_elements: usize,
    wavelength: f64,
    beta_ur: f64,
    beta_jr: f64,
) -> CascadedChannel {
    let elements = element_positions(panel_center, n_elements, wavelength);
    let h_ur = hop(beta_ur, ap, &elements, wavelength);
    let h_jr = hop(beta_jr, user, &elements, wavelength);
    let beta_ris = cascaded_gain(&h_ur, &h_jr, beta_ur, beta_jr);
    CascadedChannel {
        h_ur,
        h_jr,
        beta_ur,
        beta_jr,
        beta_ris,
    }
}

pub fn cascaded_channels(
    layout: &NetworkLayout,
    ris_index: usize,
    u: usize,
    j: usize,
    sys: &SystemParams,
    n_elements: usize,
) -> CascadedChannel {
    let ap = layout.ap_positions[u];
    let ris = layout.ris_positions[ris_index];
    let user = layout.user_positions[j];
    cascaded_with_gains(
        ap,
        ris,
        user,
        n_elements,
        sys.wavelength(),
        hop_gain(distance_3d(ap, ris)),
        hop_gain(distance_3d(ris, user)),
    )
}

fn wrap_phase(x: f64) -> f64 {
    let w = x.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Phases that rotate every reflected path onto the direct link:
/// `theta_n = arg(h_ju) - arg([h_ur]_n [h_jr]_n)`, wrapped to `[0, 2pi)`.
pub fn optimal_phases(h_ju: Complex64, cc: &CascadedChannel) -> Vec<f64> {
    let target = if h_ju.norm() > 0.0 { h_ju.arg() } else { 0.0 };
    cc.h_ur
        .iter()
        .zip(&cc.h_jr)
        .map(|(a, b)| {
            let prod = a * b;
            if prod.norm() > 0.0 {
                wrap_phase(target - prod.arg())
            } else {
                wrap_phase(target)
            }
        })
        .collect()
}

/// `h_ju + alpha sum_n e^{i theta_n} [h_ur]_n [h_jr]_n`.
pub fn received_amplitude(h_ju: Complex64, panel: &RisPanel, cc: &CascadedChannel) -> Complex64 {
    assert_eq!(panel.theta.len(), cc.h_ur.len(), "panel/channel size mismatch");
    let reflected: Complex64 = panel
        .theta
        .iter()
        .zip(cc.h_ur.iter().zip(&cc.h_jr))
        .map(|(t, (a, b))| Complex64::from_polar(1.0, *t) * a * b)
        .sum();
    h_ju + reflected * panel.alpha
}

/// Rate with optimally phased reflection, bits/s/Hz.
pub fn ris_rate(x: f64, sigma2: f64, beta_ju: f64, beta_ris: f64, alpha: f64, n: usize) -> f64 {
    let amp = beta_ju.sqrt() + n as f64 * alpha * beta_ris.sqrt();
    (1.0 + x * amp * amp / sigma2).log2()
}

/// Panel with the largest cascaded gain for the pair `(u, j)`; ties go to the
/// lowest index. `None` when there are no panels.
pub fn assign_ris(layout: &NetworkLayout, u: usize, j: usize, sys: &SystemParams, n_elements: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in 0..layout.ris_positions.len() {
        let g = cascaded_channels(layout, r, u, j, sys, n_elements).beta_ris;
        if best.is_none_or(|(_, b)| g > b) {
            best = Some((r, g));
        }
    }
    best.map(|(r, _)| r)
}

/// Amplitude scale factors applied to the desired-signal terms of each
/// user-AP pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RisBoost {
    pub n_users: usize,
    pub n_aps: usize,
    /// Per pair (user-major), always `>= 1`.
    pub factor: Vec<f64>,
}

impl RisBoost {
    pub fn identity(n_users: usize, n_aps: usize) -> Self {
        RisBoost {
            n_users,
            n_aps,
            factor: vec![1.0; n_users * n_aps],
        }
    }

    /// Scales the desired blocks `A_j^(j)` to `S A S` and the matching first
    /// moments by `S`, where `S = diag(factor_j.)`. Interference blocks are
    /// untouched.
    pub fn apply(&self, st: &StatTerms) -> StatTerms {
        assert_eq!((st.n_users, st.n_aps), (self.n_users, self.n_aps));
        let (nj, nu) = (st.n_users, st.n_aps);
        let mut out = st.clone();
        for j in 0..nj {
            let s = &self.factor[j * nu..(j + 1) * nu];
            let start = (j * nj + j) * nu * nu;
            for r in 0..nu {
                for c in 0..nu {
                    out.gain_cov[start + r * nu + c] *= s[r] * s[c];
                }
            }
            let mstart = (j * nj + j) * nu;
            for (g, f) in out.gain_mean[mstart..mstart + nu].iter_mut().zip(s) {
                *g *= f;
            }
        }
        out
    }
}

/// Panel configuration chosen for the network plus the resulting boost.
#[derive(Debug, Clone)]
pub struct RisDeployment {
    /// Panel serving each user-AP pair, user-major.
    pub assignment: Vec<usize>,
    /// Number of distinct users each panel serves.
    pub users_served: Vec<usize>,
    /// Each panel holds the phases of the first pair it serves; the others
    /// are time-shared configurations.
    pub panels: Vec<RisPanel>,
    pub boost: RisBoost,
}

/// Assigns panels, sets their phases and derives the per-pair amplitude
/// boost. A panel serving `k` distinct users gives each of them its optimal
/// configuration for a `1/k` share of the downlink, so the power-domain
/// gain of a pair is `(1/k) g^2 + (1 - 1/k)` where `g` is the ratio of the
/// boosted to the direct amplitude.
pub fn configure(
    layout: &NetworkLayout,
    ls: &LargeScaleParams,
    sys: &SystemParams,
    n_elements: usize,
    alpha: f64,
) -> Option<RisDeployment> {
    let (nj, nu) = (ls.n_users, ls.n_aps);
    let nr = layout.ris_positions.len();
    if nr == 0 {
        return None;
    }
    let mut assignment = Vec::with_capacity(nj * nu);
    let mut ratio = Vec::with_capacity(nj * nu);
    let mut panels: Vec<Option<RisPanel>> = vec![None; nr];
    let mut served = vec![false; nr * nj];
    for j in 0..nj {
        for u in 0..nu {
            let r = assign_ris(layout, u, j, sys, n_elements).expect("at least one panel");
            let cc = cascaded_channels(layout, r, u, j, sys, n_elements);
            let direct = Complex64::new(ls.beta[ls.pair(j, u)].sqrt(), 0.0);
            let panel = RisPanel {
                n_elements,
                alpha,
                theta: optimal_phases(direct, &cc),
                position: layout.ris_positions[r],
            };
            let amp = received_amplitude(direct, &panel, &cc).norm();
            ratio.push(amp / direct.re);
            served[r * nj + j] = true;
            if panels[r].is_none() {
                panels[r] = Some(panel);
            }
            assignment.push(r);
        }
    }
    let users_served: Vec<usize> = served.chunks(nj).map(|s| s.iter().filter(|x| **x).count()).collect();
    let factor = assignment
        .iter()
        .zip(&ratio)
        .map(|(r, g)| {
            let share = 1.0 / users_served[*r] as f64;
            (share * g * g + (1.0 - share)).sqrt().max(1.0)
        })
        .collect();
    let panels = panels
        .into_iter()
        .enumerate()
        .map(|(r, p)| {
            p.unwrap_or(RisPanel {
                n_elements,
                alpha,
                theta: vec![0.0; n_elements],
                position: layout.ris_positions[r],
            })
        })
        .collect();
    Some(RisDeployment {
        assignment,
        users_served,
        panels,
        boost: RisBoost {
            n_users: nj,
            n_aps: nu,
            factor,
        },
    })
}

/// Rectifier input power with the RIS boost applied to the desired terms.
pub fn boost_input_power(p: &PowerCoefficients, st: &StatTerms, boost: &RisBoost, mode: TransmissionMode) -> Vec<f64> {
    input_power(p, &boost.apply(st), mode)
}

/// Writes `ris,element,theta_rad` rows.
pub fn write_panel_csv<W: Write>(mut out: W, panels: &[RisPanel]) -> std::io::Result<()> {
    writeln!(out, "ris,element,theta_rad")?;
    for (r, panel) in panels.iter().enumerate() {
        for (n, t) in panel.theta.iter().enumerate() {
            writeln!(out, "{r},{n},{t:.16e}")?;
        }
    }
    Ok(())
}

/// Exhaustive search over a uniform phase grid with `levels` points per
/// element. Returns the best `|h_ju + alpha sum e^{i theta} prod|^2`.
pub fn grid_search_power(h_ju: Complex64, products: &[Complex64], alpha: f64, levels: usize) -> f64 {
    let steps: Vec<Complex64> = (0..levels)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / levels as f64))
        .collect();
    let mut idx = vec![0usize; products.len()];
    let mut best: f64 = 0.0;
    loop {
        let sum: Complex64 = idx.iter().zip(products).map(|(k, p)| steps[*k] * p).sum();
        best = best.max((h_ju + sum * alpha).norm_sqr());
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return best;
            }
            idx[pos] += 1;
            if idx[pos] < levels {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::grid_aps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_channel(products: &[Complex64]) -> CascadedChannel {
        CascadedChannel {
            h_ur: products.to_vec(),
            h_jr: vec![Complex64::new(1.0, 0.0); products.len()],
            beta_ur: 1.0,
            beta_jr: 1.0,
            beta_ris: cascaded_gain(products, &vec![Complex64::new(1.0, 0.0); products.len()], 1.0, 1.0),
        }
    }

    fn sys() -> SystemParams {
        SystemParams::new(200, 5, 25, 1e-7, 0.625, 2.5e-13, 3.4e9, 3.0, 4.0).unwrap()
    }

    #[test]
    fn unit_gain_hops() {
        let p = Position::new(10.0, 10.0, 10.0);
        let cc = cascaded_with_gains(p, p, p, 8, 0.1, 1.0, 1.0);
        assert!(cc.h_ur.iter().all(|h| (h.norm() - 1.0).abs() < 1e-12));
        assert!((cc.beta_ris - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cascaded_gain_independent_of_size() {
        let ap = Position::new(0.0, 0.0, 25.0);
        let ris = Position::new(40.0, 0.0, 10.0);
        let user = Position::new(45.0, 20.0, 1.0);
        let a = cascaded_with_gains(ap, ris, user, 64, 0.088, 1e-8, 1e-6);
        let b = cascaded_with_gains(ap, ris, user, 32, 0.088, 1e-8, 1e-6);
        let direct = |cc: &CascadedChannel| {
            let m = cc.h_ur.iter().zip(&cc.h_jr).map(|(x, y)| (x * y).norm()).sum::<f64>() / cc.h_ur.len() as f64;
            m * m
        };
        assert!((a.beta_ris - direct(&a)).abs() <= 1e-12 * a.beta_ris);
        assert!((b.beta_ris - direct(&b)).abs() <= 1e-12 * b.beta_ris);
        assert!((a.beta_ris - b.beta_ris).abs() <= 1e-12 * a.beta_ris);
        assert!((a.beta_ris - 1e-14).abs() <= 1e-12 * 1e-14);
    }

    #[test]
    fn phase_for_single_rotated_product() {
        let cc = unit_channel(&[Complex64::from_polar(1.0, PI / 3.0)]);
        let theta = optimal_phases(Complex64::new(1.0, 0.0), &cc);
        assert!((theta[0] - 5.0 * PI / 3.0).abs() < 1e-12);
        // 4096-point grid: the best grid phase sits next to the closed form
        let best = (0..4096)
            .map(|k| TAU * k as f64 / 4096.0)
            .max_by(|a, b| {
                let f = |t: f64| (Complex64::new(1.0, 0.0) + Complex64::from_polar(1.0, t + PI / 3.0)).norm();
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert!((best - theta[0]).abs() <= TAU / 4096.0);
    }

    #[test]
    fn aligned_inputs_need_no_shift() {
        let cc = unit_channel(&[Complex64::new(0.5, 0.0), Complex64::new(2.0, 0.0)]);
        assert_eq!(optimal_phases(Complex64::new(3.0, 0.0), &cc), vec![0.0, 0.0]);
    }

    #[test]
    fn closed_form_matches_grid_three_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let rnd = |rng: &mut ChaCha8Rng| Complex64::from_polar(rng.random::<f64>(), rng.random::<f64>() * TAU);
            let h = rnd(&mut rng);
            let prods: Vec<_> = (0..3).map(|_| rnd(&mut rng)).collect();
            let cc = unit_channel(&prods);
            let panel = RisPanel {
                n_elements: 3,
                alpha: 0.8,
                theta: optimal_phases(h, &cc),
                position: Position::new(0.0, 0.0, 0.0),
            };
            let closed = (h.norm() + 0.8 * prods.iter().map(|p| p.norm()).sum::<f64>()).powi(2);
            let via_phases = received_amplitude(h, &panel, &cc).norm_sqr();
            assert!((closed - via_phases).abs() <= 1e-12 * closed);
            let grid = grid_search_power(h, &prods, 0.8, 64);
            assert!(grid <= closed * (1.0 + 1e-12));
            assert!(grid >= closed * (1.0 - 2.0 * (PI / 64.0).powi(2)));
        }
    }

    #[test]
    fn rate_reductions() {
        let base = ris_rate(10.0, 1.0, 0.01, 1e-6, 1.0, 0);
        assert!((base - (1.0 + 0.1f64).log2()).abs() < 1e-15);
        let r = ris_rate(10.0, 1.0, 0.01, 1e-6, 1.0, 100);
        assert!((r - 1.4f64.log2()).abs() < 1e-12);
        assert!((r - 0.4854).abs() < 1e-4);
        let mut prev = base;
        for n in 1..50 {
            let next = ris_rate(10.0, 1.0, 0.01, 1e-6, 1.0, n);
            assert!(next > prev);
            prev = next;
        }
    }

    #[test]
    fn adversarial_phases_respect_triangle_bound() {
        let prods = vec![Complex64::from_polar(0.3, 1.0), Complex64::from_polar(0.2, -2.0)];
        let cc = unit_channel(&prods);
        let h = Complex64::from_polar(1.0, 0.4);
        let mut theta = optimal_phases(h, &cc);
        theta.iter_mut().for_each(|t| *t = wrap_phase(*t + PI));
        let panel = RisPanel {
            n_elements: 2,
            alpha: 0.9,
            theta,
            position: Position::new(0.0, 0.0, 0.0),
        };
        let amp = received_amplitude(h, &panel, &cc).norm();
        assert!(amp >= (1.0 - 0.9 * 0.5f64).abs() - 1e-12);

        let single = unit_channel(&[Complex64::from_polar(0.7, 2.2)]);
        let panel = RisPanel {
            n_elements: 1,
            alpha: 0.5,
            theta: vec![1.3],
            position: Position::new(0.0, 0.0, 0.0),
        };
        let amp = received_amplitude(Complex64::new(0.0, 0.0), &panel, &single).norm();
        assert!((amp - 0.35).abs() < 1e-12);
    }

    #[test]
    fn power_scales_with_square_of_element_count() {
        let b = Complex64::from_polar(0.01, 0.7);
        let power = |n: usize| {
            let cc = unit_channel(&vec![b; n]);
            let panel = RisPanel {
                n_elements: n,
                alpha: 1.0,
                theta: optimal_phases(Complex64::new(0.0, 0.0), &cc),
                position: Position::new(0.0, 0.0, 0.0),
            };
            received_amplitude(Complex64::new(0.0, 0.0), &panel, &cc).norm_sqr()
        };
        for n in [1, 3, 16, 100] {
            assert!((power(2 * n) / power(n) - 4.0).abs() < 1e-9);
        }
    }

    fn layout_with(ris: Vec<Position>, user: Position) -> NetworkLayout {
        NetworkLayout {
            coverage_side: 100.0,
            ap_positions: grid_aps(4, 100.0, 25.0).unwrap(),
            ris_positions: ris,
            user_positions: vec![user],
        }
    }

    #[test]
    fn assignment_prefers_strongest_panel() {
        let user = Position::new(80.0, 10.0, 1.0);
        let l = layout_with(vec![Position::new(0.0, 50.0, 10.0)], user);
        assert_eq!(assign_ris(&l, 0, 0, &sys(), 8), Some(0));
        let l = layout_with(
            vec![Position::new(10.0, 90.0, 10.0), Position::new(80.0, 10.0, 1.0)],
            user,
        );
        assert_eq!(assign_ris(&l, 2, 0, &sys(), 8), Some(1));
        assert_eq!(assign_ris(&layout_with(vec![], user), 0, 0, &sys(), 8), None);
    }

    #[test]
    fn assignment_matches_exhaustive_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut pt = |z: f64| Position::new(rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0, z);
            let ris: Vec<_> = (0..5).map(|_| pt(10.0)).collect();
            let l = layout_with(ris, pt(1.0));
            for u in 0..4 {
                let gains: Vec<f64> = (0..5)
                    .map(|r| cascaded_channels(&l, r, u, 0, &sys(), 4).beta_ris)
                    .collect();
                let mut best = 0;
                for r in 1..5 {
                    if gains[r] > gains[best] {
                        best = r;
                    }
                }
                assert_eq!(assign_ris(&l, u, 0, &sys(), 4), Some(best));
            }
        }
    }

    #[test]
    fn boost_ratio_single_link() {
        let ap = Position::new(50.0, 50.0, 25.0);
        let user = Position::new(60.0, 50.0, 1.0);
        let layout = NetworkLayout {
            coverage_side: 100.0,
            ap_positions: vec![ap],
            ris_positions: vec![Position::new(60.0, 55.0, 10.0)],
            user_positions: vec![user],
        };
        let beta = 1e-9;
        let ls = LargeScaleParams::from_parts(
            1,
            1,
            1,
            vec![beta],
            vec![f64::INFINITY],
            &[vec![Complex64::new(1.0, 0.0)]],
            5,
        );
        let dep = configure(&layout, &ls, &sys(), 16, 0.7).unwrap();
        let cc = cascaded_channels(&layout, 0, 0, 0, &sys(), 16);
        let expected = (beta.sqrt() + 16.0 * 0.7 * cc.beta_ris.sqrt()) / beta.sqrt();
        assert!((dep.boost.factor[0] - expected).abs() < 1e-9 * expected);

        let st = StatTerms {
            n_users: 1,
            n_aps: 1,
            gain_cov: vec![Complex64::new(2e-9, 0.0)],
            gain_mean: vec![Complex64::new(4e-5, 0.0)],
            precoder_power: vec![1.0],
        };
        let p = PowerCoefficients::uniform(1, 1, 0.5);
        for mode in [TransmissionMode::Coherent, TransmissionMode::NonCoherent] {
            let base = input_power(&p, &st, mode)[0];
            let boosted = boost_input_power(&p, &st, &dep.boost, mode)[0];
            assert!((boosted / base - expected * expected).abs() < 1e-9 * expected * expected);
        }
        let none = RisBoost::identity(1, 1);
        assert_eq!(
            boost_input_power(&p, &st, &none, TransmissionMode::Coherent),
            input_power(&p, &st, TransmissionMode::Coherent)
        );
    }

    #[test]
    fn panel_csv() {
        let panels = vec![RisPanel {
            n_elements: 2,
            alpha: 1.0,
            theta: vec![0.0, 1.5],
            position: Position::new(0.0, 0.0, 0.0),
        }];
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &panels).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("ris,element,theta_rad"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(
            text.lines()
                .nth(2)
                .unwrap()
                .split(',')
                .nth(2)
                .unwrap()
                .parse::<f64>()
                .unwrap(),
            1.5
        );
    }
}
