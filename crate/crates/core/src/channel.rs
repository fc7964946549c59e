//! Multipath UL/DL channel model with partial reciprocity.
//!
//! The uplink channel of each user is a sum of a few propagation paths, each
//! described by a complex gain, a delay and an angle of arrival. Downlink
//! paths share the delay/angle geometry while the gains are only partially
//! reciprocal. This module generates ground-truth channels and the noisy
//! uplink training observation that the estimator consumes.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = num_complex::Complex<f64>;

/// One propagation path: complex gain, delay in seconds, angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub alpha: C64,
    pub tau: f64,
    pub theta: f64,
}

impl PathParams {
    pub fn new(alpha: C64, tau: f64, theta: f64) -> Self {
        Self { alpha, tau, theta }
    }
}

/// Array/band geometry plus the uplink training noise level.
///
/// `extrapolation_f` is the UL-to-DL carrier offset applied when a downlink
/// channel is evaluated or reconstructed from uplink parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemGeometry {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub delta_f: f64,
    pub f_c_ul: f64,
    pub f_c_dl: f64,
    pub extrapolation_f: f64,
    pub noise_var_ul: f64,
}

impl Default for SystemGeometry {
    fn default() -> Self {
        Self {
            n_antennas: 8,
            n_subcarriers: 64,
            delta_f: 120e3,
            f_c_ul: 7.25e9,
            f_c_dl: 7.75e9,
            extrapolation_f: 190e6,
            noise_var_ul: 1e-2,
        }
    }
}

impl SystemGeometry {
    /// Total training bandwidth `S * delta_f`.
    pub fn bandwidth(&self) -> f64 {
        self.n_subcarriers as f64 * self.delta_f
    }

    /// Number of complex observations per user (`N * S`).
    pub fn observation_len(&self) -> usize {
        self.n_antennas * self.n_subcarriers
    }

    /// Centered subcarrier offset `s - ceil(S/2) - 1` for 1-based `s`.
    pub fn subcarrier_offset(&self, s: usize) -> f64 {
        debug_assert!(s >= 1 && s <= self.n_subcarriers);
        s as f64 - (self.n_subcarriers as f64 / 2.0).ceil() - 1.0
    }

    /// Center subcarrier index (1-based), where the delay phase term vanishes.
    pub fn center_subcarrier(&self) -> usize {
        (self.n_subcarriers as f64 / 2.0).ceil() as usize + 1
    }

    /// Beam-squint factor `1 + s*delta_f/f_c_ul` for 1-based `s`.
    pub fn squint(&self, s: usize) -> f64 {
        1.0 + s as f64 * self.delta_f / self.f_c_ul
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_antennas == 0 {
            return Err("geometry.n_antennas must be >= 1".into());
        }
        if self.n_subcarriers == 0 {
            return Err("geometry.n_subcarriers must be >= 1".into());
        }
        if !(self.delta_f > 0.0) {
            return Err("geometry.delta_f must be > 0".into());
        }
        if !(self.f_c_ul > 0.0) || !(self.f_c_dl > 0.0) {
            return Err("geometry carrier frequencies must be > 0".into());
        }
        if self.noise_var_ul < 0.0 {
            return Err("geometry.noise_var_ul must be >= 0".into());
        }
        Ok(())
    }
}

/// Ground-truth uplink paths of one user plus the gain-reciprocity model.
///
/// `eta[l]` couples the l-th DL gain to its UL counterpart; `sigma_path_sq`
/// is the variance of the independent non-reciprocal gain component.
#[derive(Debug, Clone)]
pub struct UserChannel {
    pub paths: Vec<PathParams>,
    pub eta: Vec<f64>,
    pub sigma_path_sq: f64,
}

impl UserChannel {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

/// Noisy uplink training observation of one user, antenna-major per subcarrier.
#[derive(Debug, Clone)]
pub struct UlObservation {
    pub y: DVector<C64>,
    pub user_index: usize,
}

/// Which band a channel vector is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Ul,
    Dl,
}

/// Flat index of antenna `n0` (0-based) at subcarrier `s` (1-based).
#[inline]
pub fn flat_index(geom: &SystemGeometry, n0: usize, s: usize) -> usize {
    (s - 1) * geom.n_antennas + n0
}

fn cis(phase: f64) -> C64 {
    C64::new(phase.cos(), phase.sin())
}

/// One entry of the delay-angle steering vector.
#[inline]
pub fn steering_entry(geom: &SystemGeometry, tau: f64, theta: f64, n0: usize, s: usize) -> C64 {
    let phi = 0.5 * theta.sin() * geom.squint(s);
    let phase = -2.0 * std::f64::consts::PI
        * (n0 as f64 * phi + geom.subcarrier_offset(s) * geom.delta_f * tau);
    cis(phase)
}

/// Delay-angle steering vector over all antennas and subcarriers (length N*S).
///
/// Every entry has unit modulus, so its squared norm is exactly N*S.
pub fn steering_vector(geom: &SystemGeometry, tau: f64, theta: f64) -> DVector<C64> {
    let mut u = DVector::zeros(geom.observation_len());
    for s in 1..=geom.n_subcarriers {
        for n0 in 0..geom.n_antennas {
            u[flat_index(geom, n0, s)] = steering_entry(geom, tau, theta, n0, s);
        }
    }
    u
}

/// Steering vector together with its first and second derivatives in (tau, theta).
///
/// The norm of the steering vector is constant in both parameters, so the
/// refinement objective only needs these directional derivatives.
pub struct SteeringJet {
    pub u: DVector<C64>,
    pub d_tau: DVector<C64>,
    pub d_theta: DVector<C64>,
    pub d2_tau_tau: DVector<C64>,
    pub d2_tau_theta: DVector<C64>,
    pub d2_theta_theta: DVector<C64>,
}

pub fn steering_jet(geom: &SystemGeometry, tau: f64, theta: f64) -> SteeringJet {
    let len = geom.observation_len();
    let two_pi = 2.0 * std::f64::consts::PI;
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let mut jet = SteeringJet {
        u: DVector::zeros(len),
        d_tau: DVector::zeros(len),
        d_theta: DVector::zeros(len),
        d2_tau_tau: DVector::zeros(len),
        d2_tau_theta: DVector::zeros(len),
        d2_theta_theta: DVector::zeros(len),
    };
    for s in 1..=geom.n_subcarriers {
        let sq = geom.squint(s);
        let off = geom.subcarrier_offset(s);
        // entry = exp(-j2pi*(n0*phi(theta) + off*delta_f*tau))
        let w_tau = C64::new(0.0, -two_pi * off * geom.delta_f);
        for n0 in 0..geom.n_antennas {
            let idx = flat_index(geom, n0, s);
            let phi = 0.5 * sin_t * sq;
            let u = cis(-two_pi * (n0 as f64 * phi + off * geom.delta_f * tau));
            // d phi/d theta and d^2 phi/d theta^2
            let dphi = 0.5 * cos_t * sq;
            let d2phi = -0.5 * sin_t * sq;
            let w_theta = C64::new(0.0, -two_pi * n0 as f64 * dphi);
            let w_theta2 = C64::new(0.0, -two_pi * n0 as f64 * d2phi);
            jet.u[idx] = u;
            jet.d_tau[idx] = w_tau * u;
            jet.d_theta[idx] = w_theta * u;
            jet.d2_tau_tau[idx] = w_tau * w_tau * u;
            jet.d2_tau_theta[idx] = w_tau * w_theta * u;
            jet.d2_theta_theta[idx] = (w_theta * w_theta + w_theta2) * u;
        }
    }
    jet
}

/// Per-antenna atom of one path at subcarrier `s`, shifted by `f_offset` Hz.
///
/// With `f_offset = 0` this reproduces the uplink channel entries; with the
/// configured extrapolation offset it evaluates the downlink expression.
pub fn band_atom(geom: &SystemGeometry, tau: f64, theta: f64, f_offset: f64, s: usize) -> DVector<C64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let sq = geom.squint(s);
    let phi = 0.5 * theta.sin() * sq;
    let delay_phase = -two_pi * (f_offset + geom.subcarrier_offset(s) * geom.delta_f) * tau;
    let delay = cis(delay_phase);
    DVector::from_fn(geom.n_antennas, |n0, _| cis(-two_pi * n0 as f64 * phi) * delay)
}

/// First derivatives of [`band_atom`] in (tau, theta).
pub fn band_atom_derivs(
    geom: &SystemGeometry,
    tau: f64,
    theta: f64,
    f_offset: f64,
    s: usize,
) -> (DVector<C64>, DVector<C64>, DVector<C64>) {
    let two_pi = 2.0 * std::f64::consts::PI;
    let sq = geom.squint(s);
    let a = band_atom(geom, tau, theta, f_offset, s);
    let w_tau = C64::new(0.0, -two_pi * (f_offset + geom.subcarrier_offset(s) * geom.delta_f));
    let dphi = 0.5 * theta.cos() * sq;
    let d_tau = a.map(|v| w_tau * v);
    let d_theta = DVector::from_fn(geom.n_antennas, |n0, _| {
        C64::new(0.0, -two_pi * n0 as f64 * dphi) * a[n0]
    });
    (a, d_tau, d_theta)
}

/// Narrowband channel vector (length N) at subcarrier `s` for one band.
pub fn channel_vector(geom: &SystemGeometry, paths: &[PathParams], band: Band, s: usize) -> DVector<C64> {
    assert!(s >= 1 && s <= geom.n_subcarriers, "subcarrier index out of range");
    let f_offset = match band {
        Band::Ul => 0.0,
        Band::Dl => geom.extrapolation_f,
    };
    let mut h = DVector::zeros(geom.n_antennas);
    for p in paths {
        h += band_atom(geom, p.tau, p.theta, f_offset, s).map(|v| v * p.alpha);
    }
    h
}

/// Sample a circularly-symmetric complex Gaussian with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(scale * re, scale * im)
}

/// Downlink path set: delays and angles carried over, gains partially reciprocal.
pub fn make_dl_params<R: Rng + ?Sized>(user: &UserChannel, rng: &mut R) -> Vec<PathParams> {
    user.paths
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let eta = user.eta[l.min(user.eta.len() - 1)];
            let beta = complex_gaussian(rng, user.sigma_path_sq);
            PathParams {
                alpha: p.alpha * eta + beta * (1.0 - eta * eta).max(0.0).sqrt(),
                tau: p.tau,
                theta: p.theta,
            }
        })
        .collect()
}

/// Noisy uplink training observation `y = sum_l alpha_l u(tau_l, theta_l) + n`.
pub fn simulate_ul_observation<R: Rng + ?Sized>(
    geom: &SystemGeometry,
    user: &UserChannel,
    user_index: usize,
    rng: &mut R,
) -> UlObservation {
    let mut y = DVector::zeros(geom.observation_len());
    for p in &user.paths {
        y += steering_vector(geom, p.tau, p.theta).map(|v| v * p.alpha);
    }
    if geom.noise_var_ul > 0.0 {
        for v in y.iter_mut() {
            *v += complex_gaussian(rng, geom.noise_var_ul);
        }
    }
    UlObservation { y, user_index }
}

/// Controls for random scenario generation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub theta_max_deg: f64,
    pub eta: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { l_min: 2, l_max: 4, theta_max_deg: 60.0, eta: 0.9 }
    }
}

/// Draw one user's uplink paths: uniform path count and geometry, unit total
/// gain power (sum of |alpha_l|^2 normalized to 1).
pub fn draw_user_channel<R: Rng + ?Sized>(
    geom: &SystemGeometry,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> UserChannel {
    let l = rng.gen_range(cfg.l_min..=cfg.l_max);
    let theta_max = cfg.theta_max_deg.to_radians();
    let tau_max = 1.0 / geom.delta_f;
    let mut paths: Vec<PathParams> = (0..l)
        .map(|_| PathParams {
            alpha: complex_gaussian(rng, 1.0),
            tau: rng.gen_range(0.0..tau_max),
            theta: rng.gen_range(-theta_max..theta_max),
        })
        .collect();
    let power: f64 = paths.iter().map(|p| p.alpha.norm_sqr()).sum();
    let scale = 1.0 / power.sqrt();
    for p in &mut paths {
        p.alpha *= scale;
    }
    UserChannel {
        paths,
        eta: vec![cfg.eta; l],
        sigma_path_sq: 1.0 / l as f64,
    }
}
