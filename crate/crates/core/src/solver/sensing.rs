//! Sensing constraint machinery: beam-pattern MSE grid and SCNR matrices.
//!
//! The beam-gain matrices `A(theta) = P (I ⊗ a a^H)` and targets
//! `T(theta) = P t(theta) I` are block-diagonal, so gains and the constraint
//! assembly work with the N-dimensional steering vectors directly.

use crate::channel::C64;
use crate::solver::blocks::Dims;
use nalgebra::{DMatrix, DVector};

/// Half-wavelength ULA steering vector at the DL carrier, `||a||^2 = N`.
pub fn dl_steering(n_antennas: usize, theta: f64) -> DVector<C64> {
    let phase = -std::f64::consts::PI * theta.sin();
    DVector::from_fn(n_antennas, |n0, _| C64::from_polar(1.0, phase * n0 as f64))
}

/// Uniform angle grid of `l` points spanning [-90, 90] degrees inclusive.
pub fn uniform_angle_grid(l: usize) -> Vec<f64> {
    assert!(l >= 1);
    if l == 1 {
        return vec![0.0];
    }
    let half = std::f64::consts::FRAC_PI_2;
    (0..l)
        .map(|i| -half + i as f64 * (2.0 * half) / (l - 1) as f64)
        .collect()
}

/// Binary target pattern: 1 inside `halfwidth` of any target angle, else 0.
pub fn target_pattern(grid: &[f64], target_angles: &[f64], halfwidth: f64) -> Vec<f64> {
    grid.iter()
        .map(|&g| {
            let hit = target_angles.iter().any(|&t| (g - t).abs() <= halfwidth);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Beam-gain evaluation grid: steering vectors, binary target, transmit power.
#[derive(Debug, Clone)]
pub struct BeamGrid {
    pub angles: Vec<f64>,
    pub steering: Vec<DVector<C64>>,
    pub target: Vec<f64>,
    pub power: f64,
    pub n_antennas: usize,
}

/// Build the beam-gain grid for the MSE constraint.
pub fn beam_matrices(n_antennas: usize, angles: &[f64], target: &[f64], power: f64) -> BeamGrid {
    assert_eq!(angles.len(), target.len());
    assert!(!angles.is_empty(), "constraint grid must have at least one angle");
    BeamGrid {
        angles: angles.to_vec(),
        steering: angles.iter().map(|&t| dl_steering(n_antennas, t)).collect(),
        target: target.to_vec(),
        power,
        n_antennas,
    }
}

/// Beam-pattern MSE, in absolute units and normalized by P^2.
#[derive(Debug, Clone, Copy)]
pub struct MseValue {
    pub absolute: f64,
    pub normalized: f64,
}

impl BeamGrid {
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// `p^H A(theta_u) p = P sum_b |a^H p_b|^2`, valid for any norm of `p`.
    pub fn gain(&self, u: usize, p: &DVector<C64>) -> f64 {
        let n = self.n_antennas;
        let a = &self.steering[u];
        let n_blocks = p.len() / n;
        let mut acc = 0.0;
        for b in 0..n_blocks {
            let pb = p.rows(b * n, n);
            let mut ip = C64::new(0.0, 0.0);
            for i in 0..n {
                ip += a[i].conj() * pb[i];
            }
            acc += ip.norm_sqr();
        }
        self.power * acc
    }

    /// Target level: the matched full-array gain `P N` scaled by t(theta_u).
    pub fn target_level(&self, u: usize) -> f64 {
        self.power * self.n_antennas as f64 * self.target[u]
    }

    /// `p^H T(theta_u) p`, with `T = target_level * I`.
    pub fn target_quad(&self, u: usize, p: &DVector<C64>) -> f64 {
        self.target_level(u) * p.norm_squared()
    }

    /// Squared scale of the dB normalization: `(P N)^2`.
    pub fn norm_sq(&self) -> f64 {
        (self.power * self.n_antennas as f64).powi(2)
    }

    /// Beam-pattern MSE of `p` against the target over the grid, absolute and
    /// normalized by the squared matched-gain level `(P N)^2`.
    pub fn mse(&self, p: &DVector<C64>) -> MseValue {
        let l = self.len() as f64;
        let mut acc = 0.0;
        for u in 0..self.len() {
            let diff = self.gain(u, p) - self.target_quad(u, p);
            acc += diff * diff;
        }
        let absolute = acc / l;
        MseValue { absolute, normalized: absolute / self.norm_sq() }
    }
}

/// Quadratic-form SCNR data: target/clutter Gram blocks and the noise floor.
#[derive(Debug, Clone)]
pub struct ScnrMatrices {
    /// `G_tar^H G_tar`, one N x N block repeated down the diagonal.
    pub gt: DMatrix<C64>,
    /// `G_cl^H G_cl` block.
    pub gc: DMatrix<C64>,
    /// `N sigma_R^2 / P`, added to the denominator as an identity term.
    pub noise_floor: f64,
}

/// Build the SCNR quadratic forms from target and clutter reflections given
/// as (coefficient, angle) pairs.
pub fn build_scnr(
    dims: Dims,
    targets: &[(C64, f64)],
    clutter: &[(C64, f64)],
    sigma_r_sq: f64,
    power: f64,
) -> ScnrMatrices {
    assert!(!targets.is_empty(), "at least one sensing target is required");
    let n = dims.n_antennas;
    let reflect = |list: &[(C64, f64)]| -> DMatrix<C64> {
        let mut g = DMatrix::<C64>::zeros(n, n);
        for &(beta, theta) in list {
            let a = dl_steering(n, theta);
            g += (&a * a.adjoint()).map(|v| v * beta);
        }
        g
    };
    let g_tar = reflect(targets);
    let g_cl = reflect(clutter);
    ScnrMatrices {
        gt: g_tar.adjoint() * &g_tar,
        gc: g_cl.adjoint() * &g_cl,
        noise_floor: dims.n_antennas as f64 * sigma_r_sq / power,
    }
}

impl ScnrMatrices {
    fn block_quad(m: &DMatrix<C64>, p: &DVector<C64>) -> f64 {
        let n = m.nrows();
        let n_blocks = p.len() / n;
        let mut acc = 0.0;
        for b in 0..n_blocks {
            let pb = p.rows(b * n, n);
            acc += (pb.adjoint() * m * pb)[(0, 0)].re;
        }
        acc
    }

    pub fn numerator(&self, p: &DVector<C64>) -> f64 {
        Self::block_quad(&self.gt, p)
    }

    pub fn denominator(&self, p: &DVector<C64>) -> f64 {
        Self::block_quad(&self.gc, p) + self.noise_floor * p.norm_squared()
    }

    /// Radar SCNR `gamma_R(p)`.
    pub fn gamma(&self, p: &DVector<C64>) -> f64 {
        self.numerator(p) / self.denominator(p)
    }
}

/// Sensing constraint attached to a solve: beam-pattern MSE or SCNR.
#[derive(Debug, Clone)]
pub enum SensingSpec {
    /// Constrain the normalized beam-pattern MSE to stay below `t_mse_norm`.
    BeampatternMse { grid: BeamGrid, t_mse_norm: f64 },
    /// Constrain the SCNR to stay above the linear threshold `t_scnr`.
    Scnr { matrices: ScnrMatrices, t_scnr: f64 },
}

impl SensingSpec {
    /// Achieved constraint value: normalized MSE or linear SCNR.
    pub fn achieved(&self, p: &DVector<C64>) -> f64 {
        match self {
            SensingSpec::BeampatternMse { grid, .. } => grid.mse(p).normalized,
            SensingSpec::Scnr { matrices, .. } => matrices.gamma(p),
        }
    }

    pub fn is_feasible(&self, achieved: f64) -> bool {
        match self {
            SensingSpec::BeampatternMse { t_mse_norm, .. } => achieved <= *t_mse_norm,
            SensingSpec::Scnr { t_scnr, .. } => achieved >= *t_scnr,
        }
    }
}
