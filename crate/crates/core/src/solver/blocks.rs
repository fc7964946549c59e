//! Block-diagonal SINR matrices for the common and private streams.
//!
//! All four matrix families share the structure
//! `blkdiag_b(g_b * h h^H + e_b * Sigma) + (sigma^2/P) I` with per-block gain
//! masks, so quadratic forms and matrix accumulation work on N x N blocks and
//! never materialize the full D x D matrix.

use crate::channel::C64;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Problem dimensions: N antennas, K users, M radar streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_antennas: usize,
    pub n_users: usize,
    pub n_radar: usize,
}

impl Dims {
    pub fn new(n_antennas: usize, n_users: usize, n_radar: usize) -> Self {
        Self { n_antennas, n_users, n_radar }
    }

    /// Number of precoder columns: common + K private + M radar.
    pub fn n_blocks(&self) -> usize {
        1 + self.n_users + self.n_radar
    }

    /// Stacked precoder length `N (K + M + 1)`.
    pub fn dim(&self) -> usize {
        self.n_antennas * self.n_blocks()
    }
}

/// Which SINR matrix a quadratic form refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinrMatrix {
    /// Signal-plus-interference matrix of user k's common-stream SINR.
    UCommon,
    /// Interference matrix of user k's common-stream SINR.
    VCommon,
    /// Signal-plus-interference matrix of user k's private-stream SINR.
    UPrivate,
    /// Interference matrix of user k's private-stream SINR.
    VPrivate,
}

/// Estimated channels, per-antenna error variances and the noise floor for
/// every user, exposing the four SINR matrices per user.
#[derive(Debug, Clone)]
pub struct SinrBlocks {
    pub dims: Dims,
    channels: Vec<DVector<C64>>,
    outer: Vec<DMatrix<C64>>,
    ecm_diag: Vec<DVector<f64>>,
    pub sigma_over_p: f64,
}

/// Assemble the SINR block data. With `use_ecm = false` the error covariance
/// is replaced by zero. The first (common) block of the private-stream
/// matrices carries the error covariance plus the noise floor, so the
/// quadratic forms reproduce the scalar SINR expressions exactly.
pub fn build_sinr_blocks(
    channels: &[DVector<C64>],
    ecms: &[DVector<f64>],
    sigma_over_p: f64,
    dims: Dims,
    use_ecm: bool,
) -> Result<SinrBlocks, SolverError> {
    if channels.len() != dims.n_users {
        return Err(SolverError::DimensionMismatch(format!(
            "{} channels for {} users",
            channels.len(),
            dims.n_users
        )));
    }
    if ecms.len() != dims.n_users {
        return Err(SolverError::DimensionMismatch(format!(
            "{} error covariances for {} users",
            ecms.len(),
            dims.n_users
        )));
    }
    for (k, h) in channels.iter().enumerate() {
        if h.len() != dims.n_antennas {
            return Err(SolverError::DimensionMismatch(format!(
                "channel {k} has length {}, expected {}",
                h.len(),
                dims.n_antennas
            )));
        }
        if ecms[k].len() != dims.n_antennas {
            return Err(SolverError::DimensionMismatch(format!(
                "error covariance {k} has length {}, expected {}",
                ecms[k].len(),
                dims.n_antennas
            )));
        }
    }
    let outer = channels.iter().map(|h| h * h.adjoint()).collect();
    let ecm_diag = if use_ecm {
        ecms.to_vec()
    } else {
        vec![DVector::zeros(dims.n_antennas); dims.n_users]
    };
    Ok(SinrBlocks {
        dims,
        channels: channels.to_vec(),
        outer,
        ecm_diag,
        sigma_over_p,
    })
}

impl SinrBlocks {
    pub fn channel(&self, k: usize) -> &DVector<C64> {
        &self.channels[k]
    }

    pub fn ecm_diag(&self, k: usize) -> &DVector<f64> {
        &self.ecm_diag[k]
    }

    /// Does matrix `(kind, k)` carry the channel outer product in block `b`?
    fn gain_mask(&self, kind: SinrMatrix, k: usize, b: usize) -> bool {
        match kind {
            SinrMatrix::UCommon => true,
            SinrMatrix::VCommon => b != 0,
            SinrMatrix::UPrivate => b != 0,
            SinrMatrix::VPrivate => b != 0 && b != k + 1,
        }
    }

    /// Quadratic form `p^H M p` of the selected SINR matrix, valid for any
    /// (not necessarily unit-norm) stacked vector.
    pub fn quad(&self, kind: SinrMatrix, k: usize, p: &DVector<C64>) -> f64 {
        let n = self.dims.n_antennas;
        debug_assert_eq!(p.len(), self.dims.dim());
        let h = &self.channels[k];
        let sig = &self.ecm_diag[k];
        let mut acc = 0.0;
        for b in 0..self.dims.n_blocks() {
            let pb = p.rows(b * n, n);
            if self.gain_mask(kind, k, b) {
                let mut ip = C64::new(0.0, 0.0);
                for i in 0..n {
                    ip += h[i].conj() * pb[i];
                }
                acc += ip.norm_sqr();
            }
            for i in 0..n {
                acc += sig[i] * pb[i].norm_sqr();
            }
        }
        acc + self.sigma_over_p * p.norm_squared()
    }

    /// SINR of user k's common stream, `U_c/V_c - 1`.
    pub fn sinr_common(&self, k: usize, p: &DVector<C64>) -> f64 {
        self.quad(SinrMatrix::UCommon, k, p) / self.quad(SinrMatrix::VCommon, k, p) - 1.0
    }

    /// SINR of user k's private stream, `U_k/V_k - 1`.
    pub fn sinr_private(&self, k: usize, p: &DVector<C64>) -> f64 {
        self.quad(SinrMatrix::UPrivate, k, p) / self.quad(SinrMatrix::VPrivate, k, p) - 1.0
    }

    /// Add `weight * (blkdiag part of matrix (kind, k))` into per-block
    /// accumulators, and return the scalar identity coefficient to add.
    pub(crate) fn accumulate(
        &self,
        kind: SinrMatrix,
        k: usize,
        weight: f64,
        acc: &mut [DMatrix<C64>],
    ) -> f64 {
        let n = self.dims.n_antennas;
        for (b, block) in acc.iter_mut().enumerate() {
            if self.gain_mask(kind, k, b) {
                *block += self.outer[k].map(|v| v * weight);
            }
            for i in 0..n {
                block[(i, i)] += C64::new(weight * self.ecm_diag[k][i], 0.0);
            }
        }
        weight * self.sigma_over_p
    }

    /// Dense D x D matrix, for verification against the block fast path.
    pub fn dense(&self, kind: SinrMatrix, k: usize) -> DMatrix<C64> {
        let n = self.dims.n_antennas;
        let d = self.dims.dim();
        let mut m = DMatrix::<C64>::zeros(d, d);
        for b in 0..self.dims.n_blocks() {
            for i in 0..n {
                for j in 0..n {
                    let mut v = C64::new(0.0, 0.0);
                    if self.gain_mask(kind, k, b) {
                        v += self.outer[k][(i, j)];
                    }
                    if i == j {
                        v += C64::new(self.ecm_diag[k][i], 0.0);
                    }
                    m[(b * n + i, b * n + j)] = v;
                }
            }
        }
        for i in 0..d {
            m[(i, i)] += C64::new(self.sigma_over_p, 0.0);
        }
        m
    }
}
