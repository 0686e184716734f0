#![allow(dead_code)]

use std::f64::consts::PI;

use cure_core::channel::{
    db_to_linear, draw_channels, lmmse_estimate, path_loss_db, rician_factor_db, LargeScaleParams,
};
use cure_core::config::{ScenarioSpec, SystemParams};
use cure_core::powerctl::MmfProblem;
use cure_core::wpt::{mrt_precoders, stat_terms, PowerCoefficients, StatTerms};
use num_complex::Complex64;
use rand::Rng;

pub fn reference_system() -> SystemParams {
    ScenarioSpec::default().system
}

/// Large-scale statistics for users at random distances from each AP, with
/// the distance-based gain and Rician factor and a random LOS direction.
pub fn random_large_scale<R: Rng>(
    rng: &mut R,
    n_users: usize,
    n_aps: usize,
    n_antennas: usize,
    n_pilots: usize,
) -> LargeScaleParams {
    let pairs = n_users * n_aps;
    let mut beta = Vec::with_capacity(pairs);
    let mut kappa = Vec::with_capacity(pairs);
    let mut steering = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let d: f64 = rng.random_range(10.0..150.0);
        beta.push(db_to_linear(path_loss_db(d)));
        kappa.push(db_to_linear(rician_factor_db(d)));
        let cosine: f64 = rng.random_range(-1.0..1.0);
        steering.push(
            (0..n_antennas)
                .map(|n| Complex64::from_polar(1.0, PI * n as f64 * cosine))
                .collect::<Vec<_>>(),
        );
    }
    LargeScaleParams::from_parts(n_users, n_aps, n_antennas, beta, kappa, &steering, n_pilots)
}

/// Statistics of a random instance pushed through estimation and MRT.
pub fn random_stat_terms<R: Rng>(
    rng: &mut R,
    sys: &SystemParams,
    n_users: usize,
    n_aps: usize,
    n_antennas: usize,
    n_realizations: usize,
) -> StatTerms {
    let ls = random_large_scale(rng, n_users, n_aps, n_antennas, sys.delta_p);
    let ensemble = draw_channels(&ls, n_realizations, rng).unwrap();
    let est = lmmse_estimate(&ensemble, &ls, sys, rng).unwrap();
    let w = mrt_precoders(&est.per_realization, &ls).unwrap();
    stat_terms(&ensemble, &w, &ls).unwrap()
}

/// Exhaustive search for a two-user, single-AP problem over a `n x n` grid
/// of powers. Returns the best grid min-SE and the largest change of min-SE
/// between neighbouring feasible grid points.
pub fn grid_oracle(prob: &MmfProblem, n: usize) -> (f64, f64) {
    assert_eq!((prob.st.n_users, prob.st.n_aps), (2, 1));
    let rho = prob.sys.rho_d;
    let pw = &prob.st.precoder_power;
    let axis = |j: usize, k: usize| rho / pw[j] * k as f64 / (n - 1) as f64;
    let mut value = vec![f64::NAN; n * n];
    for a in 0..n {
        for b in 0..n {
            let (pa, pb) = (axis(0, a), axis(1, b));
            if pa * pw[0] + pb * pw[1] > rho * (1.0 + 1e-12) {
                continue;
            }
            let p = PowerCoefficients {
                n_users: 2,
                n_aps: 1,
                p: vec![pa, pb],
            };
            value[a * n + b] = prob.evaluate(&p).unwrap().min_se();
        }
    }
    let best = value
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut step: f64 = 0.0;
    for a in 0..n - 1 {
        for b in 0..n - 1 {
            let here = value[a * n + b];
            for other in [value[(a + 1) * n + b], value[a * n + b + 1], value[(a + 1) * n + b + 1]] {
                if !here.is_nan() && !other.is_nan() {
                    step = step.max((here - other).abs());
                }
            }
        }
    }
    (best, step)
}
