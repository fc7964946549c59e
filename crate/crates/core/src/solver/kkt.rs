//! KKT matrix assembly and the objective value of the dual stationarity form.
//!
//! The stationarity condition is `L(p, nu) p = zeta(p, nu) R(p, nu) p`. Both
//! matrices are block-diagonal: rate terms contribute per-user SINR blocks
//! weighted by softmax coefficients of the common rates, the sensing terms
//! contribute a shared N x N accumulation per block. The positive scalar
//! prefactors of `L` and `R` are dropped since only the direction of
//! `R^{-1} L p` matters after normalization.

use crate::channel::C64;
use crate::solver::blocks::{SinrBlocks, SinrMatrix};
use crate::solver::sensing::SensingSpec;
use nalgebra::{DMatrix, DVector};

/// Smooth minimum: `-(1/eta) ln( mean(exp(-eta x)) )`, max-shift stabilized.
///
/// Lies within `[min x, min x + ln(K)/eta]`.
pub fn lse_min(values: &[f64], eta: f64) -> f64 {
    assert!(!values.is_empty() && eta > 0.0);
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean: f64 = values.iter().map(|&x| (-eta * (x - m)).exp()).sum::<f64>()
        / values.len() as f64;
    m - mean.ln() / eta
}

/// Softmax weights of `-eta * x`, i.e. the gradient weights of [`lse_min`].
pub fn softmax_weights(values: &[f64], eta: f64) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = values.iter().map(|&x| (-eta * (x - m)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Shared scalar state of one KKT assembly point.
struct RateState {
    u_c: Vec<f64>,
    v_c: Vec<f64>,
    u_p: Vec<f64>,
    v_p: Vec<f64>,
    weights: Vec<f64>,
}

fn rate_state(p: &DVector<C64>, blocks: &SinrBlocks, use_rs: bool, eta_lse: f64) -> RateState {
    let k_users = blocks.dims.n_users;
    let mut st = RateState {
        u_c: vec![0.0; k_users],
        v_c: vec![0.0; k_users],
        u_p: vec![0.0; k_users],
        v_p: vec![0.0; k_users],
        weights: vec![0.0; k_users],
    };
    for k in 0..k_users {
        st.u_c[k] = blocks.quad(SinrMatrix::UCommon, k, p);
        st.v_c[k] = blocks.quad(SinrMatrix::VCommon, k, p);
        st.u_p[k] = blocks.quad(SinrMatrix::UPrivate, k, p);
        st.v_p[k] = blocks.quad(SinrMatrix::VPrivate, k, p);
    }
    if use_rs {
        let rates: Vec<f64> = (0..k_users).map(|k| (st.u_c[k] / st.v_c[k]).log2()).collect();
        st.weights = softmax_weights(&rates, eta_lse);
    }
    st
}

/// The two block-diagonal KKT matrices at one iterate.
pub struct KktPair {
    pub l_blocks: Vec<DMatrix<C64>>,
    pub r_blocks: Vec<DMatrix<C64>>,
    n: usize,
}

impl KktPair {
    pub fn apply_l(&self, p: &DVector<C64>) -> DVector<C64> {
        self.block_apply(&self.l_blocks, p)
    }

    pub fn apply_r(&self, p: &DVector<C64>) -> DVector<C64> {
        self.block_apply(&self.r_blocks, p)
    }

    fn block_apply(&self, mats: &[DMatrix<C64>], p: &DVector<C64>) -> DVector<C64> {
        let n = self.n;
        let mut out = DVector::zeros(p.len());
        for (b, m) in mats.iter().enumerate() {
            let pb = p.rows(b * n, n).clone_owned();
            out.rows_mut(b * n, n).copy_from(&(m * pb));
        }
        out
    }

    /// Solve `R z = q` block-wise via Hermitian Cholesky (LU fallback).
    pub fn solve_r(&self, q: &DVector<C64>) -> DVector<C64> {
        let n = self.n;
        let mut out = DVector::zeros(q.len());
        for (b, m) in self.r_blocks.iter().enumerate() {
            let qb = q.rows(b * n, n).clone_owned();
            let z = m
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&qb))
                .unwrap_or_else(|| m.clone().lu().solve(&qb).expect("R block solve"));
            out.rows_mut(b * n, n).copy_from(&z);
        }
        out
    }

    pub fn dense_l(&self) -> DMatrix<C64> {
        self.dense(&self.l_blocks)
    }

    pub fn dense_r(&self) -> DMatrix<C64> {
        self.dense(&self.r_blocks)
    }

    fn dense(&self, mats: &[DMatrix<C64>]) -> DMatrix<C64> {
        let n = self.n;
        let d = n * mats.len();
        let mut out = DMatrix::zeros(d, d);
        for (b, m) in mats.iter().enumerate() {
            out.view_mut((b * n, b * n), (n, n)).copy_from(m);
        }
        out
    }
}

/// Assemble the bracketed KKT matrices of the stationarity condition at `p`.
///
/// The sensing coefficient is `2 nu ln2 / (L P^2)`, the value for which
/// `(L - R) p` reproduces the exact gradient of the Lagrangian
/// `F(p) - nu (MSE/P^2 - T/P^2)`; the beam-gain and target matrices are
/// cross-assigned between the two sides.
pub fn build_kkt_matrices(
    p: &DVector<C64>,
    nu: f64,
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    use_rs: bool,
    eta_lse: f64,
) -> KktPair {
    let dims = blocks.dims;
    let n = dims.n_antennas;
    let st = rate_state(p, blocks, use_rs, eta_lse);

    let mut l_blocks = vec![DMatrix::<C64>::zeros(n, n); dims.n_blocks()];
    let mut r_blocks = vec![DMatrix::<C64>::zeros(n, n); dims.n_blocks()];
    let mut l_scalar = 0.0;
    let mut r_scalar = 0.0;

    for k in 0..dims.n_users {
        if use_rs {
            l_scalar += blocks.accumulate(SinrMatrix::UCommon, k, st.weights[k] / st.u_c[k], &mut l_blocks);
            r_scalar += blocks.accumulate(SinrMatrix::VCommon, k, st.weights[k] / st.v_c[k], &mut r_blocks);
        }
        l_scalar += blocks.accumulate(SinrMatrix::UPrivate, k, 1.0 / st.u_p[k], &mut l_blocks);
        r_scalar += blocks.accumulate(SinrMatrix::VPrivate, k, 1.0 / st.v_p[k], &mut r_blocks);
    }

    if nu > 0.0 {
        match sensing {
            SensingSpec::BeampatternMse { grid, .. } => {
                let power = grid.power;
                let coeff =
                    2.0 * nu * std::f64::consts::LN_2 / (grid.len() as f64 * grid.norm_sq());
                // gradient of -nu*MSE splits as: target-weighted beam matrices
                // (pTp)A + (pAp)T ascend on the left, gain-weighted (pAp)A +
                // (pTp)T descend on the right
                let mut w_a = DMatrix::<C64>::zeros(n, n);
                let mut w_t = DMatrix::<C64>::zeros(n, n);
                for u in 0..grid.len() {
                    let g = grid.gain(u, p);
                    let q = grid.target_quad(u, p);
                    let a = &grid.steering[u];
                    let outer = a * a.adjoint();
                    w_a += outer.map(|v| v * g);
                    if grid.target[u] != 0.0 {
                        w_t += outer.map(|v| v * q);
                    }
                    l_scalar += coeff * g * grid.target_level(u);
                    r_scalar += coeff * q * grid.target_level(u);
                }
                for b in 0..dims.n_blocks() {
                    l_blocks[b] += w_t.map(|v| v * (coeff * power));
                    r_blocks[b] += w_a.map(|v| v * (coeff * power));
                }
            }
            SensingSpec::Scnr { matrices, .. } => {
                let num = matrices.numerator(p);
                let den = matrices.denominator(p);
                for b in 0..dims.n_blocks() {
                    l_blocks[b] += matrices.gt.map(|v| v * (nu / num));
                    r_blocks[b] += matrices.gc.map(|v| v * (nu / den));
                }
                r_scalar += nu * matrices.noise_floor / den;
            }
        }
    }

    for b in 0..dims.n_blocks() {
        for i in 0..n {
            l_blocks[b][(i, i)] += C64::new(l_scalar, 0.0);
            r_blocks[b][(i, i)] += C64::new(r_scalar, 0.0);
        }
    }
    KktPair { l_blocks, r_blocks, n }
}

/// `log2 zeta(p, nu)`: the Lagrangian value of the dual problem.
///
/// Equals the smoothed common rate plus the private-rate sum plus the
/// multiplier times the (normalized) constraint slack.
pub fn log2_zeta(
    p: &DVector<C64>,
    nu: f64,
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    use_rs: bool,
    eta_lse: f64,
) -> f64 {
    let st = rate_state(p, blocks, use_rs, eta_lse);
    let mut v = 0.0;
    for k in 0..blocks.dims.n_users {
        v += (st.u_p[k] / st.v_p[k]).log2();
    }
    if use_rs {
        let rates: Vec<f64> = (0..blocks.dims.n_users)
            .map(|k| (st.u_c[k] / st.v_c[k]).log2())
            .collect();
        v += lse_min(&rates, eta_lse);
    }
    match sensing {
        SensingSpec::BeampatternMse { grid, t_mse_norm } => {
            v -= nu * (grid.mse(p).normalized - t_mse_norm);
        }
        SensingSpec::Scnr { matrices, t_scnr } => {
            v += nu * (matrices.gamma(p) / t_scnr).log2();
        }
    }
    v
}

/// `zeta` itself; the log-domain form is preferred for monitoring.
pub fn zeta(
    p: &DVector<C64>,
    nu: f64,
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    use_rs: bool,
    eta_lse: f64,
) -> f64 {
    log2_zeta(p, nu, blocks, sensing, use_rs, eta_lse).exp2()
}

/// Sum-SE lower bound with the hard minimum for the common rate (reporting form).
pub fn se_sum_lower(p: &DVector<C64>, blocks: &SinrBlocks, use_rs: bool) -> f64 {
    let k_users = blocks.dims.n_users;
    let mut v = 0.0;
    for k in 0..k_users {
        v += (blocks.quad(SinrMatrix::UPrivate, k, p) / blocks.quad(SinrMatrix::VPrivate, k, p))
            .log2();
    }
    if use_rs {
        let common = (0..k_users)
            .map(|k| {
                (blocks.quad(SinrMatrix::UCommon, k, p) / blocks.quad(SinrMatrix::VCommon, k, p))
                    .log2()
            })
            .fold(f64::INFINITY, f64::min);
        v += common;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::blocks::{build_sinr_blocks, Dims};
    use crate::solver::sensing::{beam_matrices, target_pattern, uniform_angle_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lse_min_identities() {
        assert!((lse_min(&[3.7, 3.7, 3.7], 12.0) - 3.7).abs() < 1e-12);
        assert!((lse_min(&[-2.5], 7.0) + 2.5).abs() < 1e-12);
        // no overflow for large magnitudes
        assert!(lse_min(&[1e6, 1e6 - 1.0], 10.0).is_finite());
        assert!(lse_min(&[-1e6, -1e6 + 2.0], 10.0).is_finite());
    }

    #[test]
    fn lse_min_bounds_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.gen_range(1..8);
            let vals: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let eta = rng.gen_range(0.5..40.0);
            let m = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let lse = lse_min(&vals, eta);
            assert!(lse >= m - 1e-12);
            assert!(lse <= m + (k as f64).ln() / eta + 1e-12);
        }
    }

    fn setup(
        dims: Dims,
        seed: u64,
    ) -> (crate::solver::blocks::SinrBlocks, SensingSpec, DVector<C64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<DVector<C64>> = (0..dims.n_users)
            .map(|_| {
                DVector::from_fn(dims.n_antennas, |_, _| {
                    crate::channel::complex_gaussian(&mut rng, 1.0)
                })
            })
            .collect();
        let ecms: Vec<DVector<f64>> = (0..dims.n_users)
            .map(|_| DVector::from_fn(dims.n_antennas, |_, _| rng.gen_range(0.0..0.05)))
            .collect();
        let blocks = build_sinr_blocks(&channels, &ecms, 1e-3, dims, true).unwrap();
        let angles = uniform_angle_grid(31);
        let target = target_pattern(&angles, &[0.0], 10f64.to_radians());
        let grid = beam_matrices(dims.n_antennas, &angles, &target, 1.0);
        let sensing = SensingSpec::BeampatternMse { grid, t_mse_norm: 0.05 };
        let mut p = DVector::from_fn(dims.dim(), |_, _| {
            crate::channel::complex_gaussian(&mut rng, 1.0)
        });
        let norm = p.norm();
        p /= C64::new(norm, 0.0);
        (blocks, sensing, p)
    }

    #[test]
    fn kkt_matrices_are_hermitian() {
        let dims = Dims::new(4, 2, 2);
        let (blocks, sensing, p) = setup(dims, 3);
        let pair = build_kkt_matrices(&p, 7.3, &blocks, &sensing, true, 10.0);
        for m in pair.l_blocks.iter().chain(pair.r_blocks.iter()) {
            let asym = (m - m.adjoint()).norm() / m.norm();
            assert!(asym < 1e-10, "asymmetry {asym}");
        }
    }

    #[test]
    fn nu_zero_removes_sensing_terms() {
        let dims = Dims::new(4, 2, 2);
        let (blocks, sensing, p) = setup(dims, 4);
        let with = build_kkt_matrices(&p, 0.0, &blocks, &sensing, true, 10.0);
        // rebuild with a grid pointing somewhere else entirely
        let angles = uniform_angle_grid(7);
        let target = target_pattern(&angles, &[1.0], 0.05);
        let other = SensingSpec::BeampatternMse {
            grid: beam_matrices(dims.n_antennas, &angles, &target, 1.0),
            t_mse_norm: 1.0,
        };
        let without = build_kkt_matrices(&p, 0.0, &blocks, &other, true, 10.0);
        for (a, b) in with.l_blocks.iter().zip(without.l_blocks.iter()) {
            assert!((a - b).norm() < 1e-14);
        }
        for (a, b) in with.r_blocks.iter().zip(without.r_blocks.iter()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn gradient_identity_against_finite_differences() {
        // (2/ln2) [Re; Im]((L - R) p) must equal the finite-difference
        // gradient of log2(zeta) in the real parametrization of p.
        let dims = Dims::new(3, 2, 1);
        let (blocks, sensing, p) = setup(dims, 5);
        let nu = 4.2;
        let eta = 10.0;
        let pair = build_kkt_matrices(&p, nu, &blocks, &sensing, true, eta);
        let analytic = (pair.apply_l(&p) - pair.apply_r(&p)).map(|v| v * (2.0 / std::f64::consts::LN_2));

        let f = |q: &DVector<C64>| log2_zeta(q, nu, &blocks, &sensing, true, eta);
        let h = 1e-6;
        let d = dims.dim();
        let mut max_rel: f64 = 0.0;
        for i in 0..d {
            for part in 0..2 {
                let mut qp = p.clone();
                let mut qm = p.clone();
                let delta = if part == 0 { C64::new(h, 0.0) } else { C64::new(0.0, h) };
                qp[i] += delta;
                qm[i] -= delta;
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                let an = if part == 0 { analytic[i].re } else { analytic[i].im };
                let rel = (fd - an).abs() / an.abs().max(1e-9);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-5, "max relative gradient error {max_rel}");
    }

    #[test]
    fn zeta_equals_sum_se_when_constraint_term_vanishes() {
        let dims = Dims::new(4, 3, 1);
        let (blocks, sensing, p) = setup(dims, 6);
        // nu = 0 removes the constraint term entirely
        let v = log2_zeta(&p, 0.0, &blocks, &sensing, true, 10.0);
        let rates: Vec<f64> = (0..dims.n_users)
            .map(|k| {
                (blocks.quad(SinrMatrix::UCommon, k, &p) / blocks.quad(SinrMatrix::VCommon, k, &p))
                    .log2()
            })
            .collect();
        let mut expected = lse_min(&rates, 10.0);
        for k in 0..dims.n_users {
            expected += (blocks.quad(SinrMatrix::UPrivate, k, &p)
                / blocks.quad(SinrMatrix::VPrivate, k, &p))
            .log2();
        }
        assert!((v - expected).abs() < 1e-12);

        // active constraint satisfied with equality: exponent term vanishes
        if let SensingSpec::BeampatternMse { grid, .. } = &sensing {
            let tight = SensingSpec::BeampatternMse {
                grid: grid.clone(),
                t_mse_norm: grid.mse(&p).normalized,
            };
            let v = log2_zeta(&p, 123.0, &blocks, &tight, true, 10.0);
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn zeta_matches_term_by_term_lagrangian_oracle() {
        let dims = Dims::new(3, 2, 2);
        let (blocks, sensing, p) = setup(dims, 7);
        let (nu, eta) = (2.9, 14.0);
        let v = log2_zeta(&p, nu, &blocks, &sensing, true, eta);

        // independent evaluation straight from the Lagrangian definition
        let k_users = dims.n_users;
        let mut acc = 0.0;
        let mut sum_exp = 0.0;
        for k in 0..k_users {
            let r = (blocks.quad(SinrMatrix::UCommon, k, &p)
                / blocks.quad(SinrMatrix::VCommon, k, &p))
            .log2();
            sum_exp += (-eta * r).exp();
            acc += (blocks.quad(SinrMatrix::UPrivate, k, &p)
                / blocks.quad(SinrMatrix::VPrivate, k, &p))
            .log2();
        }
        acc += -(sum_exp / k_users as f64).ln() / eta;
        if let SensingSpec::BeampatternMse { grid, t_mse_norm } = &sensing {
            let l = grid.len() as f64;
            let mut mse = 0.0;
            for u in 0..grid.len() {
                let d = grid.gain(u, &p) - grid.target_quad(u, &p);
                mse += d * d;
            }
            mse /= l * grid.norm_sq();
            acc -= nu * (mse - t_mse_norm);
        }
        assert!((v - acc).abs() < 1e-10, "{v} vs {acc}");
    }
}
