//! 2D Newtonized orthogonal matching pursuit over delay and angle.
//!
//! Estimates the uplink path parameters from one noisy training observation
//! by alternating coarse grid detection, per-path Newton refinement of
//! (delay, angle) on the matched-filter objective, and a joint least-squares
//! gain recalibration. The estimated uplink parameters are then mapped to the
//! downlink band through the partial-reciprocity gain rule.

use crate::channel::{
    band_atom, steering_entry, steering_jet, steering_vector, C64, PathParams, SystemGeometry,
    UlObservation,
};
use nalgebra::{DMatrix, DVector};

/// Estimator knobs. Grid sizes are oversampling factors relative to S and N.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NompConfig {
    pub oversample_tau: usize,
    pub oversample_theta: usize,
    pub max_paths: usize,
    /// Detection stops when the grid metric falls below `gamma * sigma^2 * ln(NS)`.
    pub threshold_gamma: f64,
    pub single_refine_steps: usize,
    pub cyclic_rounds: usize,
    /// Absolute floor: stop once residual power drops below this fraction of ||y||^2.
    pub min_residual_rel: f64,
}

impl Default for NompConfig {
    fn default() -> Self {
        Self {
            oversample_tau: 4,
            oversample_theta: 4,
            max_paths: 8,
            threshold_gamma: 8.0,
            single_refine_steps: 10,
            cyclic_rounds: 3,
            min_residual_rel: 1e-10,
        }
    }
}

impl NompConfig {
    pub fn n_tau(&self, geom: &SystemGeometry) -> usize {
        (self.oversample_tau * geom.n_subcarriers).max(1)
    }

    pub fn n_theta(&self, geom: &SystemGeometry) -> usize {
        (self.oversample_theta * geom.n_antennas).max(1)
    }
}

/// Delay grid node `i` of `n_tau`, spanning [0, 1/delta_f).
pub fn tau_grid_node(geom: &SystemGeometry, n_tau: usize, i: usize) -> f64 {
    i as f64 / (n_tau as f64 * geom.delta_f)
}

/// Angle grid node `j` of `n_theta`, interior-uniform over (-pi/2, pi/2).
pub fn theta_grid_node(n_theta: usize, j: usize) -> f64 {
    (j as f64 + 0.5) * std::f64::consts::PI / n_theta as f64 - std::f64::consts::FRAC_PI_2
}

/// Result of one grid detection.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub tau: f64,
    pub theta: f64,
    pub alpha: C64,
    /// Matched-filter metric |u^H y_r|^2 / (NS) at the detected node.
    pub metric: f64,
}

/// Estimated uplink path set plus the final residual.
#[derive(Debug, Clone)]
pub struct ParamEstimate {
    pub paths: Vec<PathParams>,
    pub residual: DVector<C64>,
    pub n_detected: usize,
    /// Residual power after each completed outer iteration, starting at ||y||^2.
    pub residual_trace: Vec<f64>,
}

impl ParamEstimate {
    /// Recompute `y - sum_l alpha_l u(tau_l, theta_l)` and compare to the stored residual.
    pub fn residual_consistent(&self, y: &DVector<C64>, geom: &SystemGeometry, tol: f64) -> bool {
        let mut r = y.clone();
        for p in &self.paths {
            r -= steering_vector(geom, p.tau, p.theta).map(|v| v * p.alpha);
        }
        (r - &self.residual).norm() <= tol * y.norm().max(1.0)
    }
}

/// Matched-filter metric and least-squares gain of one candidate atom.
fn atom_fit(geom: &SystemGeometry, y_res: &DVector<C64>, tau: f64, theta: f64) -> (C64, f64) {
    let ns = geom.observation_len() as f64;
    let mut ip = C64::new(0.0, 0.0);
    for s in 1..=geom.n_subcarriers {
        for n0 in 0..geom.n_antennas {
            let idx = crate::channel::flat_index(geom, n0, s);
            ip += steering_entry(geom, tau, theta, n0, s).conj() * y_res[idx];
        }
    }
    (ip / ns, ip.norm_sqr() / ns)
}

/// Coarse detection: maximize |u^H y_r|^2 / ||u||^2 over the delay-angle grid.
///
/// Ties break toward the lowest (delay-index, angle-index) pair.
pub fn detect_path(
    y_res: &DVector<C64>,
    geom: &SystemGeometry,
    grid: (usize, usize),
) -> Detection {
    let (n_tau, n_theta) = grid;
    assert!(n_tau >= 1 && n_theta >= 1, "grid sizes must be >= 1");
    let n = geom.n_antennas;
    let s_count = geom.n_subcarriers;
    let ns = geom.observation_len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut best = (0usize, 0usize, f64::NEG_INFINITY, C64::new(0.0, 0.0));
    let mut collapsed = vec![C64::new(0.0, 0.0); s_count];
    for j in 0..n_theta {
        let theta = theta_grid_node(n_theta, j);
        let sin_t = theta.sin();
        // collapse antennas: b_s = sum_n conj(a_{n,s}(theta)) y_{n,s}
        for s in 1..=s_count {
            let phi = 0.5 * sin_t * geom.squint(s);
            let mut acc = C64::new(0.0, 0.0);
            for n0 in 0..n {
                let w = C64::from_polar(1.0, two_pi * n0 as f64 * phi);
                acc += w * y_res[crate::channel::flat_index(geom, n0, s)];
            }
            collapsed[s - 1] = acc;
        }
        for i in 0..n_tau {
            let tau = tau_grid_node(geom, n_tau, i);
            let mut z = C64::new(0.0, 0.0);
            for s in 1..=s_count {
                let phase = two_pi * geom.subcarrier_offset(s) * geom.delta_f * tau;
                z += C64::from_polar(1.0, phase) * collapsed[s - 1];
            }
            let metric = z.norm_sqr() / ns;
            let lex_lower = (i, j) < (best.0, best.1);
            if metric > best.2 || (metric == best.2 && lex_lower) {
                best = (i, j, metric, z / ns);
            }
        }
    }
    Detection {
        tau: tau_grid_node(geom, n_tau, best.0),
        theta: theta_grid_node(n_theta, best.1),
        alpha: best.3,
        metric: best.2,
    }
}

fn wrap_tau(geom: &SystemGeometry, tau: f64) -> f64 {
    // the steering vector is periodic in tau with period 1/delta_f
    let period = 1.0 / geom.delta_f;
    tau.rem_euclid(period)
}

fn clamp_theta(theta: f64) -> f64 {
    let lim = std::f64::consts::FRAC_PI_2 - 1e-9;
    theta.clamp(-lim, lim)
}

/// Newton refinement of one path on the residual it was detected in.
///
/// Each step proposes a Newton update when the 2x2 Hessian is negative
/// definite, otherwise a curvature-scaled gradient-ascent step; the learning
/// rate is halved (at most 10 times) until the matched-filter metric does not
/// decrease, and a step that still decreases it is rejected. The gain is
/// re-fit by least squares after every accepted move.
pub fn newton_refine(
    y_res: &DVector<C64>,
    geom: &SystemGeometry,
    estimate: (C64, f64, f64),
    steps: usize,
) -> (C64, f64, f64) {
    let (_, mut tau, mut theta) = estimate;
    let mut alpha;
    let (a, m) = atom_fit(geom, y_res, tau, theta);
    alpha = a;
    let mut metric = m;

    let ns = geom.observation_len() as f64;
    for _ in 0..steps {
        let jet = steering_jet(geom, tau, theta);
        // derivatives of the gain-concentrated metric m = |u^H y|^2 / NS,
        // which is what each step maximizes since the gain is re-fit afterwards
        let z = jet.u.dotc(y_res);
        let z_t = jet.d_tau.dotc(y_res);
        let z_h = jet.d_theta.dotc(y_res);
        let z_tt = jet.d2_tau_tau.dotc(y_res);
        let z_th = jet.d2_tau_theta.dotc(y_res);
        let z_hh = jet.d2_theta_theta.dotc(y_res);
        let g = [
            2.0 / ns * (z.conj() * z_t).re,
            2.0 / ns * (z.conj() * z_h).re,
        ];
        let h11 = 2.0 / ns * (z_t.norm_sqr() + (z.conj() * z_tt).re);
        let h12 = 2.0 / ns * ((z_h.conj() * z_t).re + (z.conj() * z_th).re);
        let h22 = 2.0 / ns * (z_h.norm_sqr() + (z.conj() * z_hh).re);
        let det = h11 * h22 - h12 * h12;

        let dir = if h11 < 0.0 && det > 0.0 {
            // Newton: -H^{-1} g
            [-(h22 * g[0] - h12 * g[1]) / det, -(h11 * g[1] - h12 * g[0]) / det]
        } else {
            // gradient ascent, scaled by the diagonal curvature magnitude
            let s0 = h11.abs().max(1e-12 * geom.bandwidth().powi(2));
            let s1 = h22.abs().max(1e-12);
            [g[0] / s0, g[1] / s1]
        };

        let mut mu = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let cand_tau = wrap_tau(geom, tau + mu * dir[0]);
            let cand_theta = clamp_theta(theta + mu * dir[1]);
            let (cand_alpha, cand_metric) = atom_fit(geom, y_res, cand_tau, cand_theta);
            if cand_metric >= metric {
                tau = cand_tau;
                theta = cand_theta;
                alpha = cand_alpha;
                metric = cand_metric;
                accepted = true;
                break;
            }
            mu *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (alpha, tau, theta)
}

fn joint_ls_gains(
    y: &DVector<C64>,
    geom: &SystemGeometry,
    paths: &mut [PathParams],
) -> DVector<C64> {
    let l = paths.len();
    let atoms: Vec<DVector<C64>> = paths
        .iter()
        .map(|p| steering_vector(geom, p.tau, p.theta))
        .collect();
    let mut gram = DMatrix::<C64>::zeros(l, l);
    let mut rhs = DVector::<C64>::zeros(l);
    for i in 0..l {
        for j in 0..l {
            gram[(i, j)] = atoms[i].dotc(&atoms[j]);
        }
        rhs[i] = atoms[i].dotc(y);
    }
    // tiny ridge keeps near-duplicate atoms solvable
    let ridge = 1e-12 * geom.observation_len() as f64;
    for i in 0..l {
        gram[(i, i)] += C64::new(ridge, 0.0);
    }
    let gains = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| gram.lu().solve(&rhs).expect("gram solve"));
    for (p, g) in paths.iter_mut().zip(gains.iter()) {
        p.alpha = *g;
    }
    let mut residual = y.clone();
    for (atom, g) in atoms.iter().zip(gains.iter()) {
        residual -= atom.map(|v| v * *g);
    }
    residual
}

/// Full NOMP loop: detect, refine, cyclically re-refine, recalibrate gains.
///
/// Returns an empty path set when the first detection already falls below the
/// stopping threshold. The estimator is deterministic for fixed inputs.
pub fn estimate(y: &UlObservation, geom: &SystemGeometry, cfg: &NompConfig) -> ParamEstimate {
    assert!(cfg.max_paths >= 1, "max_paths must be >= 1");
    let grid = (cfg.n_tau(geom), cfg.n_theta(geom));
    let ns = geom.observation_len() as f64;
    let threshold = cfg.threshold_gamma * geom.noise_var_ul * ns.ln();
    let total_power = y.y.norm_squared();
    let floor = cfg.min_residual_rel * total_power;

    let mut paths: Vec<PathParams> = Vec::new();
    let mut residual = y.y.clone();
    let mut trace = vec![total_power];

    while paths.len() < cfg.max_paths {
        if residual.norm_squared() <= floor {
            break;
        }
        let det = detect_path(&residual, geom, grid);
        if det.metric <= threshold {
            break;
        }
        let (alpha, tau, theta) =
            newton_refine(&residual, geom, (det.alpha, det.tau, det.theta), cfg.single_refine_steps);
        paths.push(PathParams { alpha, tau, theta });

        for _ in 0..cfg.cyclic_rounds {
            for i in 0..paths.len() {
                // residual with path i added back in
                let mut y_i = y.y.clone();
                for (j, p) in paths.iter().enumerate() {
                    if j != i {
                        y_i -= steering_vector(geom, p.tau, p.theta).map(|v| v * p.alpha);
                    }
                }
                let cur = (paths[i].alpha, paths[i].tau, paths[i].theta);
                let (a, t, th) = newton_refine(&y_i, geom, cur, 1);
                paths[i] = PathParams { alpha: a, tau: t, theta: th };
            }
        }
        residual = joint_ls_gains(&y.y, geom, &mut paths);
        trace.push(residual.norm_squared());
    }

    ParamEstimate {
        n_detected: paths.len(),
        paths,
        residual,
        residual_trace: trace,
    }
}

/// Reconstruct the downlink channel (length N) at subcarrier `s` from the
/// estimated uplink parameters: gains scaled by the reciprocity coefficient,
/// delays and angles carried over, evaluated at the configured carrier offset.
pub fn reconstruct_dl(
    est: &ParamEstimate,
    eta: f64,
    geom: &SystemGeometry,
    s: usize,
) -> DVector<C64> {
    let mut h = DVector::zeros(geom.n_antennas);
    for p in &est.paths {
        h += band_atom(geom, p.tau, p.theta, geom.extrapolation_f, s).map(|v| v * (p.alpha * eta));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{channel_vector, simulate_ul_observation, Band, UserChannel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_geom(noise_var: f64) -> SystemGeometry {
        SystemGeometry {
            n_antennas: 8,
            n_subcarriers: 32,
            noise_var_ul: noise_var,
            ..SystemGeometry::default()
        }
    }

    fn observe(geom: &SystemGeometry, paths: &[PathParams], seed: u64) -> UlObservation {
        let user = UserChannel {
            paths: paths.to_vec(),
            eta: vec![1.0; paths.len()],
            sigma_path_sq: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        simulate_ul_observation(geom, &user, 0, &mut rng)
    }

    #[test]
    fn detect_exact_grid_node() {
        let geom = test_geom(0.0);
        let cfg = NompConfig::default();
        let grid = (cfg.n_tau(&geom), cfg.n_theta(&geom));
        let tau = tau_grid_node(&geom, grid.0, 17);
        let theta = theta_grid_node(grid.1, 11);
        let y = steering_vector(&geom, tau, theta);
        let det = detect_path(&y, &geom, grid);
        assert!((det.tau - tau).abs() * geom.delta_f < 1e-12);
        assert!((det.theta - theta).abs() < 1e-12);
        assert!((det.alpha - C64::new(1.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn detect_zero_input_breaks_ties_to_lowest_indices() {
        let geom = test_geom(0.0);
        let y = DVector::zeros(geom.observation_len());
        let det = detect_path(&y, &geom, (7, 5));
        assert_eq!(det.alpha, C64::new(0.0, 0.0));
        assert_eq!(det.tau, tau_grid_node(&geom, 7, 0));
        assert_eq!(det.theta, theta_grid_node(5, 0));
        assert_eq!(det.metric, 0.0);
    }

    #[test]
    fn detect_matches_exhaustive_oracle_and_nearest_node() {
        let geom = test_geom(10f64.powf(-4.0)); // SNR 40 dB for unit-gain path
        let tau0 = 0.3137 / geom.delta_f;
        let theta0 = 0.4321;
        let y = observe(&geom, &[PathParams::new(C64::new(1.0, 0.0), tau0, theta0)], 9).y;
        let cfg = NompConfig::default();
        let grid = (cfg.n_tau(&geom), cfg.n_theta(&geom));
        let det = detect_path(&y, &geom, grid);

        // exhaustive oracle over the same grid via direct steering products
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                let tau = tau_grid_node(&geom, grid.0, i);
                let theta = theta_grid_node(grid.1, j);
                let u = steering_vector(&geom, tau, theta);
                let m = u.dotc(&y).norm_sqr() / geom.observation_len() as f64;
                if m > best.0 {
                    best = (m, tau, theta);
                }
            }
        }
        assert!((det.metric - best.0).abs() / best.0 < 1e-12);
        assert_eq!(det.tau, best.1);
        assert_eq!(det.theta, best.2);
        // nearest node to the truth at this SNR
        assert!((det.tau - tau0).abs() * geom.delta_f <= 0.5 / grid.0 as f64 * 1.01);
        assert!((det.theta - theta0).abs() <= 0.5 * std::f64::consts::PI / grid.1 as f64 * 1.01);
    }

    #[test]
    fn refine_fixed_point_at_local_maximum() {
        let geom = test_geom(0.0);
        let tau = 12.0 / (128.0 * geom.delta_f);
        let theta = 0.25;
        let y = steering_vector(&geom, tau, theta);
        let (alpha, t, th) = newton_refine(&y, &geom, (C64::new(1.0, 0.0), tau, theta), 1);
        assert!((t - tau).abs() * geom.delta_f < 1e-12);
        assert!((th - theta).abs() < 1e-12);
        assert!((alpha - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn refine_reaches_offgrid_truth_at_high_snr() {
        let geom = test_geom(1e-4);
        let tau0 = 0.2719 / geom.delta_f;
        let theta0 = -0.3833;
        let y = observe(&geom, &[PathParams::new(C64::new(0.9, -0.4), tau0, theta0)], 21).y;
        let cfg = NompConfig::default();
        let det = detect_path(&y, &geom, (cfg.n_tau(&geom), cfg.n_theta(&geom)));
        let (_, tau, theta) = newton_refine(&y, &geom, (det.alpha, det.tau, det.theta), 20);
        assert!((tau - tau0).abs() * geom.delta_f < 1e-3, "tau err {}", (tau - tau0).abs() * geom.delta_f);
        assert!((theta - theta0).abs() < 1e-3, "theta err {}", (theta - theta0).abs());
    }

    #[test]
    fn refine_never_decreases_metric() {
        let geom = test_geom(0.5);
        let cfg = NompConfig::default();
        let grid = (cfg.n_tau(&geom), cfg.n_theta(&geom));
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paths = [PathParams::new(
                crate::channel::complex_gaussian(&mut rng, 1.0),
                rng.gen_range(0.0..1.0 / geom.delta_f),
                rng.gen_range(-1.0..1.0),
            )];
            let y = observe(&geom, &paths, seed ^ 0xabcd).y;
            // random start, not necessarily near the peak
            let tau = rng.gen_range(0.0..1.0 / geom.delta_f);
            let theta = rng.gen_range(-1.2..1.2);
            let (_, m0) = super::atom_fit(&geom, &y, tau, theta);
            let (_, t1, th1) = newton_refine(&y, &geom, (C64::new(0.0, 0.0), tau, theta), 5);
            let (_, m1) = super::atom_fit(&geom, &y, t1, th1);
            assert!(m1 >= m0 - 1e-12, "seed {seed}: {m0} -> {m1}");
            let _ = grid;
        }
    }

    #[test]
    fn estimate_noiseless_single_path() {
        let geom = test_geom(0.0);
        let truth = PathParams::new(C64::new(0.7, 0.5), 0.4712 / geom.delta_f, 0.617);
        let y = observe(&geom, &[truth], 1);
        let est = estimate(&y, &geom, &NompConfig::default());
        assert_eq!(est.n_detected, 1);
        let p = est.paths[0];
        assert!((p.alpha - truth.alpha).norm() / truth.alpha.norm() < 1e-3);
        assert!(est.residual_consistent(&y.y, &geom, 1e-9));
    }

    #[test]
    fn estimate_recovers_two_separated_paths() {
        let geom = test_geom(1e-4);
        let truth = [
            PathParams::new(C64::new(1.0, 0.2), 0.21 / geom.delta_f, 0.52),
            PathParams::new(C64::new(-0.5, 0.7), 0.63 / geom.delta_f, -0.38),
        ];
        let y = observe(&geom, &truth, 33);
        let est = estimate(&y, &geom, &NompConfig::default());
        assert!(est.n_detected >= 2, "detected {}", est.n_detected);
        for t in &truth {
            let best = est
                .paths
                .iter()
                .min_by(|a, b| {
                    let da = (a.tau - t.tau).abs() * geom.delta_f + (a.theta - t.theta).abs();
                    let db = (b.tau - t.tau).abs() * geom.delta_f + (b.theta - t.theta).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert!((best.tau - t.tau).abs() * geom.delta_f < 1e-2);
            assert!((best.theta - t.theta).abs() < 1e-2);
            assert!((best.alpha - t.alpha).norm() / t.alpha.norm() < 1e-2);
        }
    }

    #[test]
    fn estimate_pure_noise_terminates() {
        let geom = test_geom(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let user = UserChannel { paths: vec![], eta: vec![], sigma_path_sq: 1.0 };
        let y = simulate_ul_observation(&geom, &user, 0, &mut rng);
        let cfg = NompConfig::default();
        let est = estimate(&y, &geom, &cfg);
        assert!(est.n_detected <= cfg.max_paths);
        assert!(est.residual.norm_squared() <= y.y.norm_squared() + 1e-9);
        // residual power never increases across outer iterations
        for w in est.residual_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn reconstruct_dl_trivial_cases() {
        let mut geom = test_geom(0.0);
        geom.extrapolation_f = 0.0;
        let truth = PathParams::new(C64::new(0.3, -0.8), 0.37 / geom.delta_f, 0.22);
        let est = ParamEstimate {
            paths: vec![truth],
            residual: DVector::zeros(geom.observation_len()),
            n_detected: 1,
            residual_trace: vec![],
        };
        let s = 5;
        let h = reconstruct_dl(&est, 1.0, &geom, s);
        let ul = channel_vector(&geom, &[truth], Band::Ul, s);
        assert!((h - ul).norm() < 1e-12);

        let empty = ParamEstimate {
            paths: vec![],
            residual: DVector::zeros(geom.observation_len()),
            n_detected: 0,
            residual_trace: vec![],
        };
        assert_eq!(reconstruct_dl(&empty, 1.0, &geom, s).norm(), 0.0);
    }

    #[test]
    fn reconstruct_dl_end_to_end_noiseless() {
        let geom = test_geom(0.0);
        let truth = [
            PathParams::new(C64::new(0.8, 0.1), 0.18 / geom.delta_f, 0.71),
            PathParams::new(C64::new(0.2, -0.6), 0.59 / geom.delta_f, -0.45),
        ];
        let y = observe(&geom, &truth, 4);
        let est = estimate(&y, &geom, &NompConfig::default());
        let s = geom.center_subcarrier();
        let h_hat = reconstruct_dl(&est, 1.0, &geom, s);
        let h_true = channel_vector(&geom, &truth, Band::Dl, s);
        let rel = (h_hat - &h_true).norm() / h_true.norm();
        assert!(rel < 1e-3, "relative reconstruction error {rel}");
    }
}
