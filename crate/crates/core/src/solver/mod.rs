//! RSMA-aided ISAC precoder optimization via generalized power iteration.
//!
//! The inner loop projects the stacked precoder through `K(p, nu) = R^{-1} L`
//! and renormalizes until the iterate settles; the outer loop bisects the
//! sensing multiplier to the smallest value whose solution meets the
//! constraint. Variants: no rate splitting (common block pinned to zero), no
//! error covariance, radar-only (multiplier fixed at the bracket top), and an
//! SCNR constraint in place of the beam-pattern MSE.

pub mod blocks;
pub mod kkt;
pub mod sensing;

pub use blocks::{build_sinr_blocks, Dims, SinrBlocks, SinrMatrix, SolverError};
pub use kkt::{build_kkt_matrices, log2_zeta, lse_min, se_sum_lower, softmax_weights, zeta, KktPair};
pub use sensing::{
    beam_matrices, build_scnr, dl_steering, target_pattern, uniform_angle_grid, BeamGrid,
    MseValue, ScnrMatrices, SensingSpec,
};

use crate::channel::C64;
use nalgebra::DVector;
use rand::Rng;

/// Stacked unit-norm precoder: [common | private 1..K | radar 1..M].
#[derive(Debug, Clone)]
pub struct PrecoderVector {
    pub data: DVector<C64>,
    pub dims: Dims,
}

impl PrecoderVector {
    pub fn from_data(data: DVector<C64>, dims: Dims) -> Self {
        assert_eq!(data.len(), dims.dim(), "precoder length mismatch");
        Self { data, dims }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { data: DVector::zeros(dims.dim()), dims }
    }

    pub fn block(&self, b: usize) -> DVector<C64> {
        let n = self.dims.n_antennas;
        self.data.rows(b * n, n).clone_owned()
    }

    pub fn common(&self) -> DVector<C64> {
        self.block(0)
    }

    pub fn private(&self, k: usize) -> DVector<C64> {
        self.block(1 + k)
    }

    pub fn radar(&self, m: usize) -> DVector<C64> {
        self.block(1 + self.dims.n_users + m)
    }

    pub fn set_block(&mut self, b: usize, v: &DVector<C64>) {
        let n = self.dims.n_antennas;
        self.data.rows_mut(b * n, n).copy_from(v);
    }

    pub fn normalize(&mut self) {
        let norm = self.data.norm();
        if norm > 0.0 {
            self.data /= C64::new(norm, 0.0);
        }
    }

    /// Rotate the global phase so the largest-magnitude entry is real positive.
    pub fn canonical_phase(&mut self) {
        let mut best = (0usize, 0.0f64);
        for (i, v) in self.data.iter().enumerate() {
            if v.norm_sqr() > best.1 {
                best = (i, v.norm_sqr());
            }
        }
        let v = self.data[best.0];
        if v.norm() > 0.0 {
            let rot = v.conj() / C64::new(v.norm(), 0.0);
            self.data *= rot;
        }
    }
}

/// All algorithmic knobs of the solver.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// LogSumExp sharpness for the common-rate minimum.
    pub eta_lse: f64,
    /// Upper limit for the automatic sharpness doubling.
    pub eta_lse_max: f64,
    /// Doubling triggers when the smooth/hard common-rate gap exceeds this.
    pub lse_gap_bits: f64,
    /// Inner convergence tolerance on the iterate difference norm.
    pub eps_p: f64,
    /// Inner iteration cap.
    pub t_max: usize,
    /// Outer bisection tolerance on the multiplier bracket width.
    pub eps_nu: f64,
    /// Outer iteration cap.
    pub n_max: usize,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Transmit power (linear).
    pub power: f64,
    pub use_rs: bool,
    pub use_ecm: bool,
    /// Fix the multiplier at `nu_max` and skip the bisection.
    pub radar_only: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta_lse: 10.0,
            eta_lse_max: 40.0,
            lse_gap_bits: 0.1,
            eps_p: 1e-5,
            t_max: 100,
            eps_nu: 1e-3,
            n_max: 40,
            nu_min: 0.0,
            nu_max: 1e4,
            power: 1.0,
            use_rs: true,
            use_ecm: true,
            radar_only: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eta_lse > 0.0) {
            return Err("solver.eta_lse must be > 0".into());
        }
        if self.nu_min < 0.0 {
            return Err("solver.nu_min must be >= 0 (dual feasibility)".into());
        }
        if self.nu_max < self.nu_min {
            return Err("solver.nu_max must be >= nu_min".into());
        }
        if !(self.power > 0.0) {
            return Err("solver.power must be > 0".into());
        }
        Ok(())
    }
}

/// Anything that can play the role of `p -> K(p) p` in the power iteration.
pub trait PowerOperator {
    fn dim(&self) -> usize;
    fn apply(&self, p: &DVector<C64>) -> DVector<C64>;
}

/// A fixed matrix; used to validate the iteration against dense
/// eigendecomposition.
pub struct FixedOperator(pub nalgebra::DMatrix<C64>);

impl PowerOperator for FixedOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, p: &DVector<C64>) -> DVector<C64> {
        &self.0 * p
    }
}

/// Normalized power iteration until the iterate moves less than `eps_p`.
///
/// Returns (final vector, iterations, converged). `monitor` sees every
/// accepted iterate.
pub fn power_iterate<O: PowerOperator>(
    op: &O,
    p0: &DVector<C64>,
    eps_p: f64,
    t_max: usize,
    mut monitor: impl FnMut(&DVector<C64>),
) -> (DVector<C64>, usize, bool) {
    let mut p = p0.clone();
    let norm = p.norm();
    assert!(norm > 0.0, "initial vector must be nonzero");
    p /= C64::new(norm, 0.0);
    for t in 1..=t_max {
        let mut q = op.apply(&p);
        let qn = q.norm();
        if !(qn > 0.0) || !qn.is_finite() {
            return (p, t, false);
        }
        q /= C64::new(qn, 0.0);
        let diff = (&q - &p).norm();
        p = q;
        monitor(&p);
        if diff < eps_p {
            return (p, t, true);
        }
    }
    (p, t_max, false)
}

/// Power iteration with backtracking: a step whose objective value drops by
/// more than 1e-9 is pulled back along the chord toward the previous iterate
/// (fixed points are unchanged) until the objective no longer decreases. A
/// step that cannot be repaired is rejected, which terminates the loop.
///
/// For a constant Hermitian PSD operator the objective (Rayleigh quotient)
/// ascends monotonically, so no backtracking triggers and this is the plain
/// normalized power iteration.
pub fn power_iterate_ascent<O: PowerOperator>(
    op: &O,
    p0: &DVector<C64>,
    eps_p: f64,
    t_max: usize,
    mut objective: impl FnMut(&DVector<C64>) -> f64,
) -> (DVector<C64>, usize, bool, usize) {
    let mut p = p0.clone();
    let norm = p.norm();
    assert!(norm > 0.0, "initial vector must be nonzero");
    p /= C64::new(norm, 0.0);
    let mut value = objective(&p);
    let mut violations = 0usize;
    for t in 1..=t_max {
        let mut q = op.apply(&p);
        let qn = q.norm();
        if !(qn > 0.0) || !qn.is_finite() {
            return (p, t, false, violations);
        }
        q /= C64::new(qn, 0.0);
        let mut cand = q;
        let mut cand_value = objective(&cand);
        let mut accepted = cand_value >= value - 1e-9;
        if !accepted {
            for _ in 0..20 {
                let mut half = (&cand + &p).map(|v| v * 0.5);
                let hn = half.norm();
                if !(hn > 0.0) {
                    break;
                }
                half /= C64::new(hn, 0.0);
                cand = half;
                cand_value = objective(&cand);
                if cand_value >= value - 1e-9 {
                    accepted = true;
                    break;
                }
            }
        }
        if !accepted {
            // no ascent available along the iteration chord
            violations += 1;
            return (p, t, true, violations);
        }
        let diff = (&cand - &p).norm();
        p = cand;
        value = cand_value;
        if diff < eps_p {
            return (p, t, true, violations);
        }
    }
    (p, t_max, false, violations)
}

/// `K(p, nu) p` built from the SINR blocks and the sensing constraint.
pub struct KktOperator<'a> {
    pub blocks: &'a SinrBlocks,
    pub sensing: &'a SensingSpec,
    pub nu: f64,
    pub use_rs: bool,
    pub eta_lse: f64,
}

impl PowerOperator for KktOperator<'_> {
    fn dim(&self) -> usize {
        self.blocks.dims.dim()
    }

    fn apply(&self, p: &DVector<C64>) -> DVector<C64> {
        let pair = build_kkt_matrices(p, self.nu, self.blocks, self.sensing, self.use_rs, self.eta_lse);
        pair.solve_r(&pair.apply_l(p))
    }
}

/// Outcome of one inner GPI run at a fixed multiplier.
#[derive(Debug, Clone)]
pub struct GpiOutcome {
    pub precoder: PrecoderVector,
    pub iters: usize,
    pub converged: bool,
    /// Steps on which log2(zeta) dropped by more than 1e-9.
    pub ascent_violations: usize,
}

/// Inner loop: power-iterate `K(p, nu)` from `p_init` at a fixed multiplier.
pub fn gpi_inner(
    nu: f64,
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    cfg: &SolverConfig,
    p_init: &PrecoderVector,
) -> GpiOutcome {
    gpi_inner_with_eta(nu, blocks, sensing, cfg, cfg.eta_lse, p_init)
}

fn gpi_inner_with_eta(
    nu: f64,
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    cfg: &SolverConfig,
    eta_lse: f64,
    p_init: &PrecoderVector,
) -> GpiOutcome {
    let op = KktOperator { blocks, sensing, nu, use_rs: cfg.use_rs, eta_lse };
    let (p, iters, converged, violations) =
        power_iterate_ascent(&op, &p_init.data, cfg.eps_p, cfg.t_max, |q| {
            log2_zeta(q, nu, blocks, sensing, cfg.use_rs, eta_lse)
        });
    let mut precoder = PrecoderVector::from_data(p, blocks.dims);
    precoder.normalize();
    GpiOutcome { precoder, iters, converged, ascent_violations: violations }
}

/// One outer-iteration record of a solve.
#[derive(Debug, Clone, Copy)]
pub struct OuterRecord {
    pub nu: f64,
    pub log2_zeta: f64,
    /// Normalized beam-pattern MSE or linear SCNR, depending on the variant.
    pub achieved: f64,
    pub se_sum: f64,
    pub inner_iters: usize,
    pub converged: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub outer: Vec<OuterRecord>,
    pub max_inner_iters: usize,
    pub total_inner_iters: usize,
    pub all_inner_converged: bool,
    pub ascent_violations: usize,
    pub eta_lse_used: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub precoder: PrecoderVector,
    pub nu_star: f64,
    pub feasible: bool,
    /// Constraint value achieved by the returned precoder.
    pub achieved: f64,
    pub diagnostics: SolveDiagnostics,
}

struct Bisection<'a> {
    blocks: &'a SinrBlocks,
    sensing: &'a SensingSpec,
    cfg: &'a SolverConfig,
    eta_lse: f64,
    warm: PrecoderVector,
    diag: SolveDiagnostics,
}

impl<'a> Bisection<'a> {
    fn eval(&mut self, nu: f64) -> (PrecoderVector, f64, bool) {
        let out = gpi_inner_with_eta(nu, self.blocks, self.sensing, self.cfg, self.eta_lse, &self.warm);
        let achieved = self.sensing.achieved(&out.precoder.data);
        let feasible = self.sensing.is_feasible(achieved);
        self.diag.outer.push(OuterRecord {
            nu,
            log2_zeta: log2_zeta(&out.precoder.data, nu, self.blocks, self.sensing, self.cfg.use_rs, self.eta_lse),
            achieved,
            se_sum: se_sum_lower(&out.precoder.data, self.blocks, self.cfg.use_rs),
            inner_iters: out.iters,
            converged: out.converged,
            feasible,
        });
        self.diag.max_inner_iters = self.diag.max_inner_iters.max(out.iters);
        self.diag.total_inner_iters += out.iters;
        self.diag.all_inner_converged &= out.converged;
        self.diag.ascent_violations += out.ascent_violations;
        // continuation from below: later evaluations restart from the last
        // infeasible-side solution, so the feasible boundary is approached
        // along one solution branch and the slack at the crossing stays small
        if !feasible {
            self.warm = out.precoder.clone();
        }
        (out.precoder, achieved, feasible)
    }

    fn run(mut self) -> Solution {
        let cfg = self.cfg;
        if cfg.radar_only {
            let (p, achieved, feasible) = self.eval(cfg.nu_max);
            return self.finish(p, cfg.nu_max, feasible, achieved);
        }

        // constraint inactive at the bracket bottom?
        let (p_lo, a_lo, f_lo) = self.eval(cfg.nu_min);
        if f_lo {
            return self.finish(p_lo, cfg.nu_min, true, a_lo);
        }
        // constraint unattainable even at the top?
        let (p_hi, a_hi, f_hi) = self.eval(cfg.nu_max);
        if !f_hi {
            return self.finish(p_hi, cfg.nu_max, false, a_hi);
        }

        let mut lo = cfg.nu_min;
        let mut hi = cfg.nu_max;
        let mut best = (p_hi, a_hi);
        let mut n = 2;
        while hi - lo > cfg.eps_nu && n < cfg.n_max {
            let nu = 0.5 * (lo + hi);
            let (p, achieved, feasible) = self.eval(nu);
            if feasible {
                hi = nu;
                best = (p, achieved);
            } else {
                lo = nu;
            }
            n += 1;
        }
        let (p, achieved) = best;
        self.finish(p, hi, true, achieved)
    }

    fn finish(self, mut p: PrecoderVector, nu: f64, feasible: bool, achieved: f64) -> Solution {
        p.canonical_phase();
        let mut diag = self.diag;
        diag.eta_lse_used = self.eta_lse;
        Solution { precoder: p, nu_star: nu, feasible, achieved, diagnostics: diag }
    }
}

/// Full solve: bisect the multiplier to the smallest feasible value, running
/// the GPI inner loop at each trial point (warm-started from the previous
/// solution). The LogSumExp sharpness doubles automatically when the smooth
/// common-rate minimum strays too far from the hard minimum.
pub fn solve(
    blocks: &SinrBlocks,
    sensing: &SensingSpec,
    cfg: &SolverConfig,
    p_init: &PrecoderVector,
) -> Solution {
    let mut eta = cfg.eta_lse;
    loop {
        let bi = Bisection {
            blocks,
            sensing,
            cfg,
            eta_lse: eta,
            warm: p_init.clone(),
            diag: SolveDiagnostics { all_inner_converged: true, ..Default::default() },
        };
        let sol = bi.run();
        if !cfg.use_rs || eta >= cfg.eta_lse_max {
            return sol;
        }
        let gap = lse_gap(&sol.precoder.data, blocks, eta);
        if gap <= cfg.lse_gap_bits {
            return sol;
        }
        eta = (eta * 2.0).min(cfg.eta_lse_max);
    }
}

/// Same solver skeleton with the SCNR constraint; the feasibility test is
/// `gamma >= t_scnr`, so the multiplier is bisected upward while infeasible.
pub fn solve_scnr(
    blocks: &SinrBlocks,
    matrices: ScnrMatrices,
    t_scnr: f64,
    cfg: &SolverConfig,
    p_init: &PrecoderVector,
) -> Solution {
    assert!(t_scnr > 0.0, "SCNR threshold must be positive");
    let sensing = SensingSpec::Scnr { matrices, t_scnr };
    solve(blocks, &sensing, cfg, p_init)
}

fn lse_gap(p: &DVector<C64>, blocks: &SinrBlocks, eta: f64) -> f64 {
    let rates: Vec<f64> = (0..blocks.dims.n_users)
        .map(|k| {
            (blocks.quad(SinrMatrix::UCommon, k, p) / blocks.quad(SinrMatrix::VCommon, k, p)).log2()
        })
        .collect();
    let hard = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    lse_min(&rates, eta) - hard
}

/// Maximum-ratio superposition start: private blocks along the channel
/// estimates, common block along their sum, radar blocks steered at the
/// targets; globally normalized.
pub fn mr_superposition_init(
    channels: &[DVector<C64>],
    target_angles: &[f64],
    dims: Dims,
    use_rs: bool,
) -> PrecoderVector {
    let n = dims.n_antennas;
    let mut p = PrecoderVector::zeros(dims);
    if use_rs {
        let mut sum = DVector::<C64>::zeros(n);
        for h in channels {
            sum += h;
        }
        let norm = sum.norm();
        if norm > 0.0 {
            p.set_block(0, &(sum / C64::new(norm, 0.0)));
        }
    }
    for (k, h) in channels.iter().enumerate() {
        let norm = h.norm();
        if norm > 0.0 {
            p.set_block(1 + k, &(h / C64::new(norm, 0.0)));
        }
    }
    for m in 0..dims.n_radar {
        let theta = if target_angles.is_empty() {
            0.0
        } else {
            target_angles[m % target_angles.len()]
        };
        let a = dl_steering(n, theta);
        p.set_block(1 + dims.n_users + m, &(a / C64::new((n as f64).sqrt(), 0.0)));
    }
    p.normalize();
    p
}

/// Random unit-norm start (common block zeroed without rate splitting).
pub fn random_init<R: Rng + ?Sized>(dims: Dims, use_rs: bool, rng: &mut R) -> PrecoderVector {
    let mut p = PrecoderVector::from_data(
        DVector::from_fn(dims.dim(), |_, _| crate::channel::complex_gaussian(rng, 1.0)),
        dims,
    );
    if !use_rs {
        p.set_block(0, &DVector::zeros(dims.n_antennas));
    }
    p.normalize();
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
        let a = DMatrix::<C64>::from_fn(d, d, |_, _| crate::channel::complex_gaussian(rng, 1.0));
        &a * a.adjoint() + DMatrix::identity(d, d) * C64::new(0.1, 0.0)
    }

    #[test]
    fn power_iteration_matches_dense_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..5 {
            let d = rng.gen_range(4..20);
            let k = random_hermitian_psd(d, &mut rng);
            let op = FixedOperator(k.clone());
            let p0 = DVector::from_fn(d, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0));
            let (p, _, _) = power_iterate(&op, &p0, 1e-12, 20_000, |_| {});
            let eig = k.symmetric_eigen();
            let lead = eig
                .eigenvalues
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let v = eig.eigenvectors.column(lead);
            let cos = p.dotc(&v).norm();
            assert!(cos > 1.0 - 1e-6, "trial {trial}: cosine similarity {cos}");
        }
    }

    #[test]
    fn power_iteration_fixed_point_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let k = random_hermitian_psd(d, &mut rng);
        let eig = k.clone().symmetric_eigen();
        let lead = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let v = eig.eigenvectors.column(lead).clone_owned();
        let op = FixedOperator(k);
        let (p, iters, converged) = power_iterate(&op, &v, 1e-9, 10, |_| {});
        assert!(converged && iters == 1);
        assert!(p.dotc(&v).norm() > 1.0 - 1e-9);
    }

    #[test]
    fn iterate_invariant_to_positive_scaling_of_l_and_r() {
        // scaling L and R by arbitrary positive constants must leave the
        // normalized iterate unchanged
        struct Scaled {
            k: DMatrix<C64>,
            a: f64,
            b: f64,
        }
        impl PowerOperator for Scaled {
            fn dim(&self) -> usize {
                self.k.nrows()
            }
            fn apply(&self, p: &DVector<C64>) -> DVector<C64> {
                (&self.k * p).map(|v| v * (self.a / self.b))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_hermitian_psd(6, &mut rng);
        let p0 = DVector::from_fn(6, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0));
        let base = Scaled { k: k.clone(), a: 1.0, b: 1.0 };
        let scaled = Scaled { k, a: 31.7, b: 0.003 };
        let (pa, _, _) = power_iterate(&base, &p0, 1e-10, 500, |_| {});
        let (pb, _, _) = power_iterate(&scaled, &p0, 1e-10, 500, |_| {});
        assert!((pa - pb).norm() < 1e-8);
    }

    #[test]
    fn canonical_phase_makes_largest_entry_real_positive() {
        let dims = Dims::new(2, 1, 0);
        let mut p = PrecoderVector::from_data(
            DVector::from_vec(vec![
                C64::new(0.1, 0.2),
                C64::new(-0.5, 0.6),
                C64::new(0.0, 0.3),
                C64::new(0.2, 0.0),
            ]),
            dims,
        );
        p.normalize();
        p.canonical_phase();
        let mut best = (0, 0.0);
        for (i, v) in p.data.iter().enumerate() {
            if v.norm_sqr() > best.1 {
                best = (i, v.norm_sqr());
            }
        }
        let v = p.data[best.0];
        assert!(v.im.abs() < 1e-12 && v.re > 0.0);
        assert!((p.data.norm() - 1.0).abs() < 1e-12);
    }
}
