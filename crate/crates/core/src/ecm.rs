//! Error covariance of the reconstructed DL channel via observed Fisher information.
//!
//! The uplink log-likelihood is differentiated analytically at the estimated
//! parameter set to form the observed Fisher information matrix. A Jacobian
//! of the DL reconstruction maps its inverse to a per-antenna error variance,
//! of which only the diagonal is kept.

use crate::channel::{band_atom_derivs, steering_jet, C64, SystemGeometry, UlObservation};
use crate::nomp::ParamEstimate;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EcmError {
    #[error("parameter estimate is empty; nothing to differentiate")]
    EmptyEstimate,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Observed Fisher information, 4L x 4L in the fixed parameter ordering
/// [Re a_1, Im a_1, tau_1, theta_1, ..., Re a_L, Im a_L, tau_L, theta_L].
#[derive(Debug, Clone)]
pub struct ObservedFim {
    pub matrix: DMatrix<f64>,
}

impl ObservedFim {
    pub fn n_params(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Per-antenna error variance of the reconstructed DL channel.
#[derive(Debug, Clone)]
pub struct ErrorCovariance {
    /// Diagonal entries, clamped at zero.
    pub diag: Vec<f64>,
    /// Full N x N matrix before diagonalization.
    pub full: Option<DMatrix<C64>>,
    /// Whether a ridge was added to invert a near-singular information matrix.
    pub regularized: bool,
    /// Number of diagonal entries clamped up to zero.
    pub n_clamped: usize,
}

impl ErrorCovariance {
    pub fn zeros(n: usize) -> Self {
        Self { diag: vec![0.0; n], full: None, regularized: false, n_clamped: 0 }
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    pub fn diag_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.diag)
    }
}

/// First derivatives of the model signal with respect to the 4L real parameters.
fn model_first_derivs(
    est: &ParamEstimate,
    geom: &SystemGeometry,
) -> (Vec<DVector<C64>>, DVector<C64>) {
    let len = geom.observation_len();
    let mut d1: Vec<DVector<C64>> = Vec::with_capacity(4 * est.paths.len());
    let mut model = DVector::<C64>::zeros(len);
    for p in &est.paths {
        let jet = steering_jet(geom, p.tau, p.theta);
        model += jet.u.map(|v| v * p.alpha);
        let j = C64::new(0.0, 1.0);
        d1.push(jet.u.clone());
        d1.push(jet.u.map(|v| v * j));
        d1.push(jet.d_tau.map(|v| v * p.alpha));
        d1.push(jet.d_theta.map(|v| v * p.alpha));
    }
    (d1, model)
}

/// Observed Fisher information at the estimated parameters.
///
/// Entry (u, v) is `(2/sigma^2) Re( d_u y_bar^H d_v y_bar - r^H d2_uv y_bar )`
/// with `r = y - y_bar` the model residual; second derivatives couple only
/// parameters of the same path.
pub fn observed_fim(
    y: &UlObservation,
    est: &ParamEstimate,
    geom: &SystemGeometry,
    sigma_sq: f64,
) -> Result<ObservedFim, EcmError> {
    if est.paths.is_empty() {
        return Err(EcmError::EmptyEstimate);
    }
    let l = est.paths.len();
    let dim = 4 * l;
    let (d1, model) = model_first_derivs(est, geom);
    let r = &y.y - &model;
    let scale = 2.0 / sigma_sq;

    let mut fim = DMatrix::<f64>::zeros(dim, dim);
    for u in 0..dim {
        for v in u..dim {
            let first = d1[u].dotc(&d1[v]).re;
            fim[(u, v)] = scale * first;
            fim[(v, u)] = fim[(u, v)];
        }
    }

    // within-path curvature corrections
    let j = C64::new(0.0, 1.0);
    for (pl, p) in est.paths.iter().enumerate() {
        let jet = steering_jet(geom, p.tau, p.theta);
        let base = 4 * pl;
        // (Re a, tau), (Re a, theta), (Im a, tau), (Im a, theta), (tau,tau), (tau,theta), (theta,theta)
        let pairs: [(usize, usize, DVector<C64>); 7] = [
            (0, 2, jet.d_tau.clone()),
            (0, 3, jet.d_theta.clone()),
            (1, 2, jet.d_tau.map(|v| v * j)),
            (1, 3, jet.d_theta.map(|v| v * j)),
            (2, 2, jet.d2_tau_tau.map(|v| v * p.alpha)),
            (2, 3, jet.d2_tau_theta.map(|v| v * p.alpha)),
            (3, 3, jet.d2_theta_theta.map(|v| v * p.alpha)),
        ];
        for (u, v, d2) in pairs {
            let corr = -scale * r.dotc(&d2).re;
            fim[(base + u, base + v)] += corr;
            if u != v {
                fim[(base + v, base + u)] += corr;
            }
        }
    }
    Ok(ObservedFim { matrix: fim })
}

/// Jacobian of the reconstructed DL channel with respect to the UL parameters.
///
/// Returns a 4L x N complex matrix: row block `l` holds the derivatives with
/// respect to [Re a_l, Im a_l, tau_l, theta_l], column `n` is the gradient of
/// the n-th antenna entry. Gain rows carry the reciprocity factor eta.
pub fn dl_jacobian(
    est: &ParamEstimate,
    eta: f64,
    geom: &SystemGeometry,
    s: usize,
) -> Result<DMatrix<C64>, EcmError> {
    if est.paths.is_empty() {
        return Err(EcmError::EmptyEstimate);
    }
    let l = est.paths.len();
    let n = geom.n_antennas;
    let mut jac = DMatrix::<C64>::zeros(4 * l, n);
    let j = C64::new(0.0, 1.0);
    for (pl, p) in est.paths.iter().enumerate() {
        let (a, d_tau, d_theta) = band_atom_derivs(geom, p.tau, p.theta, geom.extrapolation_f, s);
        let base = 4 * pl;
        for col in 0..n {
            jac[(base, col)] = eta * a[col];
            jac[(base + 1, col)] = j * eta * a[col];
            jac[(base + 2, col)] = eta * p.alpha * d_tau[col];
            jac[(base + 3, col)] = eta * p.alpha * d_theta[col];
        }
    }
    Ok(jac)
}

/// Map the inverted information matrix through the DL Jacobian and keep the
/// diagonal. A near-singular information matrix gets a trace-scaled ridge.
pub fn estimate_ecm(fim: &ObservedFim, jac: &DMatrix<C64>) -> Result<ErrorCovariance, EcmError> {
    let dim = fim.n_params();
    if jac.nrows() != dim {
        return Err(EcmError::DimensionMismatch(format!(
            "jacobian has {} rows, information matrix is {}x{}",
            jac.nrows(),
            dim,
            dim
        )));
    }
    let n = jac.ncols();

    let mut regularized = false;
    let mut mat = fim.matrix.clone();
    let base_ridge = 1e-10 * mat.trace() / dim as f64;
    let mut ridge = base_ridge;
    let chol = loop {
        if let Some(ch) = mat.clone().cholesky() {
            break ch;
        }
        regularized = true;
        for i in 0..dim {
            mat[(i, i)] += ridge;
        }
        ridge *= 10.0;
        if ridge > 1e12 * base_ridge.max(f64::MIN_POSITIVE) {
            return Err(EcmError::DimensionMismatch(
                "information matrix is not invertible".into(),
            ));
        }
    };

    // solve I * W = conj(jac) in real and imaginary parts
    let jac_re = jac.map(|v| v.re);
    let jac_im = jac.map(|v| -v.im);
    let w_re = chol.solve(&jac_re);
    let w_im = chol.solve(&jac_im);
    let w = DMatrix::<C64>::from_fn(dim, n, |r, c| C64::new(w_re[(r, c)], w_im[(r, c)]));
    let full = jac.transpose() * w;

    let mut n_clamped = 0;
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let v = full[(i, i)].re;
            if v < 0.0 {
                n_clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();

    Ok(ErrorCovariance { diag, full: Some(full), regularized, n_clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{simulate_ul_observation, steering_vector, PathParams, UserChannel};
    use crate::nomp::ParamEstimate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_geom() -> SystemGeometry {
        SystemGeometry {
            n_antennas: 4,
            n_subcarriers: 16,
            noise_var_ul: 1e-2,
            ..SystemGeometry::default()
        }
    }

    fn estimate_of(paths: Vec<PathParams>, geom: &SystemGeometry) -> ParamEstimate {
        ParamEstimate {
            residual: DVector::zeros(geom.observation_len()),
            n_detected: paths.len(),
            paths,
            residual_trace: vec![],
        }
    }

    fn random_paths(geom: &SystemGeometry, l: usize, rng: &mut ChaCha8Rng) -> Vec<PathParams> {
        (0..l)
            .map(|_| PathParams {
                alpha: crate::channel::complex_gaussian(rng, 1.0),
                tau: rng.gen_range(0.05..0.95) / geom.delta_f,
                theta: rng.gen_range(-1.0..1.0),
            })
            .collect()
    }

    fn model_signal(geom: &SystemGeometry, paths: &[PathParams]) -> DVector<C64> {
        let mut m = DVector::zeros(geom.observation_len());
        for p in paths {
            m += steering_vector(geom, p.tau, p.theta).map(|v| v * p.alpha);
        }
        m
    }

    #[test]
    fn gain_curvature_is_2ns_over_sigma_for_noiseless_fit() {
        let geom = test_geom();
        let p = PathParams::new(C64::new(0.4, -0.9), 0.3 / geom.delta_f, 0.5);
        let est = estimate_of(vec![p], &geom);
        let y = UlObservation { y: model_signal(&geom, &est.paths), user_index: 0 };
        let sigma_sq = 0.07;
        let fim = observed_fim(&y, &est, &geom, sigma_sq).unwrap();
        let expected = 2.0 * geom.observation_len() as f64 / sigma_sq;
        assert!((fim.matrix[(0, 0)] - expected).abs() / expected < 1e-12);
        assert!((fim.matrix[(1, 1)] - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn fim_is_symmetric() {
        let geom = test_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = estimate_of(random_paths(&geom, 3, &mut rng), &geom);
        let user = UserChannel { paths: est.paths.clone(), eta: vec![1.0; 3], sigma_path_sq: 0.0 };
        let y = simulate_ul_observation(&geom, &user, 0, &mut rng);
        let fim = observed_fim(&y, &est, &geom, geom.noise_var_ul).unwrap();
        let asym = (&fim.matrix - fim.matrix.transpose()).norm() / fim.matrix.norm();
        assert!(asym < 1e-10, "relative asymmetry {asym}");
    }

    #[test]
    fn fim_matches_finite_difference_hessian() {
        let geom = test_geom();
        let sigma_sq = geom.noise_var_ul;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let l = 1 + (trial % 3);
            let est = estimate_of(random_paths(&geom, l, &mut rng), &geom);
            let user =
                UserChannel { paths: est.paths.clone(), eta: vec![1.0; l], sigma_path_sq: 0.0 };
            let y = simulate_ul_observation(&geom, &user, 0, &mut rng);
            let fim = observed_fim(&y, &est, &geom, sigma_sq).unwrap();

            // independent oracle: central-difference Hessian of the exact
            // Gaussian log-likelihood -||y - model||^2 / sigma^2
            let dim = 4 * l;
            let flat: Vec<f64> = est
                .paths
                .iter()
                .flat_map(|p| [p.alpha.re, p.alpha.im, p.tau, p.theta])
                .collect();
            let loglik = |v: &[f64]| -> f64 {
                let paths: Vec<PathParams> = v
                    .chunks(4)
                    .map(|c| PathParams::new(C64::new(c[0], c[1]), c[2], c[3]))
                    .collect();
                -(&y.y - model_signal(&geom, &paths)).norm_squared() / sigma_sq
            };
            let step = |i: usize| -> f64 {
                match i % 4 {
                    2 => 1e-6 / geom.delta_f,
                    _ => 1e-6,
                }
            };
            let mut neg_hess = DMatrix::<f64>::zeros(dim, dim);
            for u in 0..dim {
                for v in u..dim {
                    let (hu, hv) = (step(u), step(v));
                    let mut x = flat.clone();
                    let eval = |x: &mut Vec<f64>, du: f64, dv: f64| {
                        x[u] = flat[u] + du;
                        x[v] = flat[v] + dv;
                        let out = loglik(x);
                        x[u] = flat[u];
                        x[v] = flat[v];
                        out
                    };
                    let h = if u == v {
                        let f0 = loglik(&flat);
                        x[u] = flat[u] + hu;
                        let fp = loglik(&x);
                        x[u] = flat[u] - hu;
                        let fm = loglik(&x);
                        x[u] = flat[u];
                        (fp - 2.0 * f0 + fm) / (hu * hu)
                    } else {
                        let fpp = eval(&mut x, hu, hv);
                        let fpm = eval(&mut x, hu, -hv);
                        let fmp = eval(&mut x, -hu, hv);
                        let fmm = eval(&mut x, -hu, -hv);
                        (fpp - fpm - fmp + fmm) / (4.0 * hu * hv)
                    };
                    neg_hess[(u, v)] = -h;
                    neg_hess[(v, u)] = -h;
                }
            }
            let rel = (&fim.matrix - &neg_hess).norm() / neg_hess.norm();
            assert!(rel < 1e-4, "trial {trial}: relative error {rel}");
        }
    }

    #[test]
    fn jacobian_trivial_single_path() {
        let mut geom = test_geom();
        geom.extrapolation_f = 0.0;
        let est = estimate_of(vec![PathParams::new(C64::new(0.3, 0.2), 0.0, 0.0)], &geom);
        let jac = dl_jacobian(&est, 1.0, &geom, 3).unwrap();
        for col in 0..geom.n_antennas {
            assert!((jac[(0, col)] - C64::new(1.0, 0.0)).norm() < 1e-14);
            assert!((jac[(1, col)] - C64::new(0.0, 1.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let geom = test_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let est = estimate_of(random_paths(&geom, 2, &mut rng), &geom);
        let eta = 0.9;
        let s = 7;
        let jac = dl_jacobian(&est, eta, &geom, s).unwrap();

        let reconstruct = |paths: &[PathParams]| -> DVector<C64> {
            let e = estimate_of(paths.to_vec(), &geom);
            crate::nomp::reconstruct_dl(&e, eta, &geom, s)
        };
        let flat: Vec<f64> = est
            .paths
            .iter()
            .flat_map(|p| [p.alpha.re, p.alpha.im, p.tau, p.theta])
            .collect();
        let unflatten = |v: &[f64]| -> Vec<PathParams> {
            v.chunks(4)
                .map(|c| PathParams::new(C64::new(c[0], c[1]), c[2], c[3]))
                .collect()
        };
        for u in 0..flat.len() {
            let h = if u % 4 == 2 { 1e-7 / geom.delta_f } else { 1e-7 };
            let mut xp = flat.clone();
            let mut xm = flat.clone();
            xp[u] += h;
            xm[u] -= h;
            let fd = (reconstruct(&unflatten(&xp)) - reconstruct(&unflatten(&xm)))
                .map(|v| v / C64::new(2.0 * h, 0.0));
            let analytic = jac.row(u).transpose();
            let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-12);
            assert!(rel < 1e-5, "param {u}: relative error {rel}");
        }
    }

    #[test]
    fn jacobian_scales_linearly_with_eta() {
        let geom = test_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let est = estimate_of(random_paths(&geom, 2, &mut rng), &geom);
        let j1 = dl_jacobian(&est, 0.4, &geom, 2).unwrap();
        let j2 = dl_jacobian(&est, 0.8, &geom, 2).unwrap();
        assert!((j2 - j1.map(|v| v * 2.0)).norm() < 1e-12);
    }

    #[test]
    fn ecm_identity_information_with_orthonormal_columns() {
        let dim = 8;
        let n = 3;
        let c = 4.0;
        let fim = ObservedFim { matrix: DMatrix::identity(dim, dim) * c };
        // orthonormal columns: disjoint unit entries
        let mut jac = DMatrix::<C64>::zeros(dim, n);
        for col in 0..n {
            jac[(2 * col, col)] = C64::new(0.6, 0.8);
        }
        let ecm = estimate_ecm(&fim, &jac).unwrap();
        for d in &ecm.diag {
            assert!((d - 1.0 / c).abs() < 1e-12);
        }
        assert!(!ecm.regularized);
        assert_eq!(ecm.n_clamped, 0);
    }

    #[test]
    fn ecm_diag_nonnegative_for_random_psd_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let dim = 8;
            let n = 4;
            let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let fim = ObservedFim { matrix: &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1 };
            let jac = DMatrix::<C64>::from_fn(dim, n, |_, _| {
                crate::channel::complex_gaussian(&mut rng, 1.0)
            });
            let ecm = estimate_ecm(&fim, &jac).unwrap();
            for d in &ecm.diag {
                assert!(*d >= 0.0);
            }
            // full matrix is Hermitian
            let full = ecm.full.unwrap();
            let herm = (&full - full.adjoint()).norm() / full.norm();
            assert!(herm < 1e-10);
        }
    }

    #[test]
    fn ecm_invariant_under_path_reordering() {
        let geom = test_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let paths = random_paths(&geom, 3, &mut rng);
        let user = UserChannel { paths: paths.clone(), eta: vec![1.0; 3], sigma_path_sq: 0.0 };
        let y = simulate_ul_observation(&geom, &user, 0, &mut rng);

        let run = |order: Vec<usize>| -> Vec<f64> {
            let est = estimate_of(order.into_iter().map(|i| paths[i]).collect(), &geom);
            let fim = observed_fim(&y, &est, &geom, geom.noise_var_ul).unwrap();
            let jac = dl_jacobian(&est, 0.9, &geom, 4).unwrap();
            estimate_ecm(&fim, &jac).unwrap().diag
        };
        let a = run(vec![0, 1, 2]);
        let b = run(vec![2, 0, 1]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9 * x.max(1e-12));
        }
    }

    #[test]
    fn empty_estimate_is_an_error() {
        let geom = test_geom();
        let est = estimate_of(vec![], &geom);
        let y = UlObservation { y: DVector::zeros(geom.observation_len()), user_index: 0 };
        assert!(observed_fim(&y, &est, &geom, 1.0).is_err());
        assert!(dl_jacobian(&est, 1.0, &geom, 1).is_err());
    }
}
