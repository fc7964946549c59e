//! Communication and sensing metrics for a designed precoder.
//!
//! Reports the spectral-efficiency lower bounds used as the design objective,
//! the genie SE at the true channels, beam patterns over a dense angle grid,
//! and sidelobe suppression relative to the main-lobe peak.

use crate::channel::C64;
use crate::solver::{dl_steering, PrecoderVector, SinrBlocks, SinrMatrix};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("main-lobe windows cover the whole grid; sidelobe level is undefined")]
    NoSidelobeRegion,
}

/// Floor for dB-normalized beam patterns.
pub const PATTERN_DB_FLOOR: f64 = -80.0;

/// Per-trial evaluation summary.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub se_common: f64,
    pub se_private: Vec<f64>,
    pub se_sum: f64,
    pub mse_achieved_db: f64,
    pub sidelobe_db: f64,
    pub nu_star: f64,
    pub inner_iters: usize,
    pub feasible: bool,
}

/// SE lower bounds from the SINR quadratic forms: hard-minimum common rate
/// and per-user private rates.
pub fn se_lower_bound(p: &PrecoderVector, blocks: &SinrBlocks) -> (f64, Vec<f64>) {
    let k_users = blocks.dims.n_users;
    let common = (0..k_users)
        .map(|k| {
            (blocks.quad(SinrMatrix::UCommon, k, &p.data)
                / blocks.quad(SinrMatrix::VCommon, k, &p.data))
            .log2()
        })
        .fold(f64::INFINITY, f64::min);
    let private = (0..k_users)
        .map(|k| {
            (blocks.quad(SinrMatrix::UPrivate, k, &p.data)
                / blocks.quad(SinrMatrix::VPrivate, k, &p.data))
            .log2()
        })
        .collect();
    (common, private)
}

/// Genie SE at the true channels: the instantaneous rates with the error
/// expectation collapsed, since the realization is known in simulation.
pub fn se_actual(
    p: &PrecoderVector,
    true_channels: &[DVector<C64>],
    sigma_over_p: f64,
) -> (f64, Vec<f64>) {
    let dims = p.dims;
    let gains = |h: &DVector<C64>| -> Vec<f64> {
        (0..dims.n_blocks()).map(|b| h.dotc(&p.block(b)).norm_sqr()).collect()
    };
    let mut common = f64::INFINITY;
    let mut private = Vec::with_capacity(dims.n_users);
    for (k, h) in true_channels.iter().enumerate() {
        let g = gains(h);
        let radar: f64 = (dims.n_users + 1..dims.n_blocks()).map(|b| g[b]).sum();
        let all_private: f64 = (1..=dims.n_users).map(|b| g[b]).sum();
        let c = (1.0 + g[0] / (all_private + radar + sigma_over_p)).log2();
        common = common.min(c);
        let others = all_private - g[k + 1];
        private.push((1.0 + g[k + 1] / (others + radar + sigma_over_p)).log2());
    }
    (common, private)
}

/// Beam pattern of the precoder over an angle grid.
#[derive(Debug, Clone)]
pub struct BeamPattern {
    pub angles: Vec<f64>,
    pub gain: Vec<f64>,
    /// Peak-normalized gains in dB, clipped at [`PATTERN_DB_FLOOR`].
    pub gain_db: Vec<f64>,
}

/// Evaluate `G(theta) = P a^H(theta) P_mat P_mat^H a(theta)` on a grid,
/// through the reshaped precoding matrix.
pub fn beam_pattern(p: &PrecoderVector, power: f64, angles: &[f64]) -> BeamPattern {
    let n = p.dims.n_antennas;
    let p_mat = DMatrix::<C64>::from_fn(n, p.dims.n_blocks(), |i, b| p.data[b * n + i]);
    let gain: Vec<f64> = angles
        .iter()
        .map(|&theta| {
            let a = dl_steering(n, theta);
            power * (p_mat.adjoint() * &a).norm_squared()
        })
        .collect();
    let peak = gain.iter().cloned().fold(f64::MIN, f64::max).max(f64::MIN_POSITIVE);
    let gain_db = gain
        .iter()
        .map(|&g| (10.0 * (g / peak).log10()).max(PATTERN_DB_FLOOR))
        .collect();
    BeamPattern { angles: angles.to_vec(), gain, gain_db }
}

/// Highest gain outside the main-lobe windows, relative to the 0 dB peak.
///
/// More negative is better. Fails when the windows swallow the whole grid.
pub fn sidelobe_suppression(
    pattern: &BeamPattern,
    target_angles: &[f64],
    mainlobe_halfwidth: f64,
) -> Result<f64, EvalError> {
    let mut worst = f64::NEG_INFINITY;
    let mut any = false;
    for (i, &theta) in pattern.angles.iter().enumerate() {
        let inside = target_angles.iter().any(|&t| (theta - t).abs() <= mainlobe_halfwidth);
        if !inside {
            any = true;
            worst = worst.max(pattern.gain_db[i]);
        }
    }
    if !any {
        return Err(EvalError::NoSidelobeRegion);
    }
    Ok(worst)
}
