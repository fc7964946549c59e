//! Seeded Monte-Carlo experiment harness.
//!
//! Runs the full pipeline (scenario draw, UL training, parameter estimation,
//! DL reconstruction, error covariance, precoder solve, evaluation) for every
//! method and sweep point, with per-trial RNG substreams derived from
//! (seed, trial) so results are independent of worker scheduling. Emits one
//! CSV row per run plus a JSON summary and per-method beam-pattern CSVs.

use crate::channel::{
    channel_vector, draw_user_channel, make_dl_params, simulate_ul_observation, Band,
    ScenarioConfig, SystemGeometry, C64,
};
use crate::ecm::{dl_jacobian, estimate_ecm, observed_fim, ErrorCovariance};
use crate::eval::{beam_pattern, se_lower_bound, sidelobe_suppression};
use crate::nomp::{estimate, reconstruct_dl, NompConfig};
use crate::solver::{
    beam_matrices, build_scnr, build_sinr_blocks, mr_superposition_init, solve, target_pattern,
    uniform_angle_grid, Dims, PrecoderVector, SensingSpec, SinrBlocks, SolverConfig,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Precoding methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Rate splitting with estimated error covariance (the full design).
    Rs,
    /// Rate splitting, error covariance zeroed in the solve.
    RsNoEcm,
    /// Conventional SDMA: no common stream.
    NoRs,
    /// Multiplier fixed at the bracket top (sensing-dominated).
    RadarOnly,
    /// Maximum ratio transmission, communication only.
    Mrt,
    /// Regularized zero forcing, communication only.
    Rzf,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rs => "rs",
            Method::RsNoEcm => "rs_no_ecm",
            Method::NoRs => "no_rs",
            Method::RadarOnly => "radar_only",
            Method::Mrt => "mrt",
            Method::Rzf => "rzf",
        }
    }

    pub fn parse(s: &str) -> Result<Method, HarnessError> {
        match s {
            "rs" => Ok(Method::Rs),
            "rs_no_ecm" => Ok(Method::RsNoEcm),
            "no_rs" => Ok(Method::NoRs),
            "radar_only" => Ok(Method::RadarOnly),
            "mrt" => Ok(Method::Mrt),
            "rzf" => Ok(Method::Rzf),
            other => Err(HarnessError::Config(format!(
                "run.methods: unknown method '{other}' (expected rs, rs_no_ecm, no_rs, radar_only, mrt, rzf)"
            ))),
        }
    }
}

/// Which axis the sweep iterates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Tmse,
    Snr,
    Scnr,
}

fn default_users() -> usize {
    4
}
fn default_radar() -> usize {
    4
}
fn default_eta() -> f64 {
    0.9
}
fn default_snr() -> Vec<f64> {
    vec![35.0]
}
fn default_l_min() -> usize {
    2
}
fn default_l_max() -> usize {
    4
}
fn default_theta_max() -> f64 {
    60.0
}

/// Users, radar streams, reciprocity and SNR points of the scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default = "default_radar")]
    pub radar_streams: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_snr")]
    pub snr_db: Vec<f64>,
    /// Uplink training SNR; defaults to the sweep point's SNR.
    #[serde(default)]
    pub ul_snr_db: Option<f64>,
    #[serde(default = "default_l_min")]
    pub l_min: usize,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_theta_max")]
    pub theta_max_deg: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            users: default_users(),
            radar_streams: default_radar(),
            eta: default_eta(),
            snr_db: default_snr(),
            ul_snr_db: None,
            l_min: default_l_min(),
            l_max: default_l_max(),
            theta_max_deg: default_theta_max(),
        }
    }
}

fn default_variant() -> String {
    "mse".into()
}
fn default_targets() -> Vec<f64> {
    vec![0.0]
}
fn default_window() -> f64 {
    5.0
}
fn default_grid() -> usize {
    181
}
fn default_tmse() -> Vec<f64> {
    vec![-11.0]
}
fn default_tscnr() -> Vec<f64> {
    vec![10.0]
}
fn default_clutter() -> Vec<(f64, f64)> {
    vec![(0.5, -50.0), (0.5, 40.0)]
}
fn default_sigma_r() -> f64 {
    0.01
}
fn default_mainlobe() -> f64 {
    10.0
}
fn default_pattern_grid() -> usize {
    721
}

/// Sensing targets, constraint grid and thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingSection {
    /// "mse" or "scnr".
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_targets")]
    pub target_angles_deg: Vec<f64>,
    /// Half-width of the t = 1 window around each target angle.
    #[serde(default = "default_window")]
    pub window_halfwidth_deg: f64,
    /// Number of constraint grid angles over [-90, 90].
    #[serde(default = "default_grid")]
    pub constraint_grid: usize,
    /// Target MSE thresholds, dB of the normalized beam-pattern MSE.
    #[serde(default = "default_tmse")]
    pub t_mse_db: Vec<f64>,
    /// Target SCNR thresholds in dB (SCNR variant).
    #[serde(default = "default_tscnr")]
    pub t_scnr_db: Vec<f64>,
    /// Clutter reflections as (coefficient, angle_deg) pairs (SCNR variant).
    #[serde(default = "default_clutter")]
    pub clutter: Vec<(f64, f64)>,
    /// Radar receive noise variance (SCNR variant).
    #[serde(default = "default_sigma_r")]
    pub sigma_r_sq: f64,
    /// Half-width of the main-lobe window for sidelobe accounting.
    #[serde(default = "default_mainlobe")]
    pub mainlobe_halfwidth_deg: f64,
    /// Number of angles in the beam-pattern evaluation grid.
    #[serde(default = "default_pattern_grid")]
    pub pattern_grid: usize,
}

impl Default for SensingSection {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            target_angles_deg: default_targets(),
            window_halfwidth_deg: default_window(),
            constraint_grid: default_grid(),
            t_mse_db: default_tmse(),
            t_scnr_db: default_tscnr(),
            clutter: default_clutter(),
            sigma_r_sq: default_sigma_r(),
            mainlobe_halfwidth_deg: default_mainlobe(),
            pattern_grid: default_pattern_grid(),
        }
    }
}

fn default_trials() -> usize {
    50
}
fn default_seed() -> u64 {
    1
}
fn default_methods() -> Vec<String> {
    vec!["rs".into()]
}
fn default_sweep() -> Sweep {
    Sweep::Tmse
}

/// Trial count, seed, methods and output options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_sweep")]
    pub sweep: Sweep,
    #[serde(default)]
    pub dump_precoders: bool,
    /// Record wall times in the rows CSV. Off by default so that identical
    /// seeds produce byte-identical outputs.
    #[serde(default)]
    pub timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            seed: default_seed(),
            methods: default_methods(),
            sweep: default_sweep(),
            dump_precoders: false,
            timing: false,
        }
    }
}

/// Full experiment description; every field has a headline-scenario default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GeometrySection,
    pub scenario: ScenarioSection,
    pub sensing: SensingSection,
    pub run: RunSection,
    pub solver: SolverConfig,
    pub nomp: NompConfig,
}

/// Geometry section: [`SystemGeometry`] minus the noise level, which the
/// harness derives from the UL SNR.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(default = "default_n")]
    pub n_antennas: usize,
    #[serde(default = "default_s")]
    pub n_subcarriers: usize,
    #[serde(default = "default_delta_f")]
    pub delta_f: f64,
    #[serde(default = "default_f_ul")]
    pub f_c_ul: f64,
    #[serde(default = "default_f_dl")]
    pub f_c_dl: f64,
    #[serde(default = "default_f_ext")]
    pub extrapolation_f: f64,
}

fn default_n() -> usize {
    8
}
fn default_s() -> usize {
    64
}
fn default_delta_f() -> f64 {
    120e3
}
fn default_f_ul() -> f64 {
    7.25e9
}
fn default_f_dl() -> f64 {
    7.75e9
}
fn default_f_ext() -> f64 {
    190e6
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            n_antennas: default_n(),
            n_subcarriers: default_s(),
            delta_f: default_delta_f(),
            f_c_ul: default_f_ul(),
            f_c_dl: default_f_dl(),
            extrapolation_f: default_f_ext(),
        }
    }
}

impl GeometrySection {
    fn to_geometry(&self, noise_var_ul: f64) -> SystemGeometry {
        SystemGeometry {
            n_antennas: self.n_antennas,
            n_subcarriers: self.n_subcarriers,
            delta_f: self.delta_f,
            f_c_ul: self.f_c_ul,
            f_c_dl: self.f_c_dl,
            extrapolation_f: self.extrapolation_f,
            noise_var_ul,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn methods(&self) -> Result<Vec<Method>, HarnessError> {
        self.run.methods.iter().map(|m| Method::parse(m)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.run.trials == 0 {
            return fail("run.trials must be >= 1".into());
        }
        if self.scenario.users == 0 {
            return fail("scenario.users must be >= 1".into());
        }
        if self.scenario.l_min == 0 || self.scenario.l_min > self.scenario.l_max {
            return fail("scenario.l_min must be in [1, l_max]".into());
        }
        if self.scenario.snr_db.is_empty() {
            return fail("scenario.snr_db must be non-empty".into());
        }
        if self.sensing.variant != "mse" && self.sensing.variant != "scnr" {
            return fail(format!(
                "sensing.variant must be 'mse' or 'scnr', got '{}'",
                self.sensing.variant
            ));
        }
        if self.sensing.target_angles_deg.is_empty() {
            return fail("sensing.target_angles_deg must be non-empty".into());
        }
        if self.sensing.constraint_grid == 0 {
            return fail("sensing.constraint_grid must be >= 1".into());
        }
        if matches!(self.run.sweep, Sweep::Tmse) && self.sensing.t_mse_db.is_empty() {
            return fail("sensing.t_mse_db must be non-empty for a tmse sweep".into());
        }
        if matches!(self.run.sweep, Sweep::Scnr) && self.sensing.t_scnr_db.is_empty() {
            return fail("sensing.t_scnr_db must be non-empty for a scnr sweep".into());
        }
        self.geometry.to_geometry(1e-2).validate().map_err(HarnessError::Config)?;
        self.solver.validate().map_err(HarnessError::Config)?;
        self.methods()?;
        Ok(())
    }
}

/// One output row: one method at one sweep point on one trial.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub snr_db: f64,
    /// Sensing threshold of this sweep point, in dB (MSE or SCNR variant).
    pub t_mse_db: f64,
    pub trial: usize,
    pub se_sum: f64,
    pub se_common: f64,
    /// Achieved normalized beam-pattern MSE (or SCNR) in dB.
    pub mse_achieved_db: f64,
    pub sidelobe_db: f64,
    pub nu_star: f64,
    pub iters: usize,
    pub feasible: bool,
    pub wall_ms: u64,
}

/// Aggregate over trials of one (method, sweep point) cell.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub snr_db: f64,
    pub t_mse_db: f64,
    pub trials: usize,
    pub se_sum_mean: f64,
    pub se_sum_std: f64,
    pub mse_achieved_db_mean: f64,
    pub sidelobe_db_mean: f64,
    pub n_feasible: usize,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
    pub elapsed_ms: u64,
}

pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub summary: RunSummary,
    /// Mean linear beam patterns per method at the first sweep point.
    pub patterns: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Stored precoders (method, point, trial, entries) when requested.
    pub precoders: Vec<(String, usize, usize, Vec<C64>)>,
}

/// Everything the per-trial pipeline produces for one user set.
pub struct TrialPipeline {
    pub channels: Vec<DVector<C64>>,
    pub ecm_diags: Vec<DVector<f64>>,
    pub true_dl: Vec<DVector<C64>>,
}

/// Deterministic RNG substream for (seed, trial).
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Run the estimation pipeline for all users of one trial.
pub fn run_pipeline(
    geom: &SystemGeometry,
    scen: &ScenarioConfig,
    nomp_cfg: &NompConfig,
    n_users: usize,
    rng: &mut ChaCha8Rng,
) -> TrialPipeline {
    let s_eval = geom.center_subcarrier();
    let mut channels = Vec::with_capacity(n_users);
    let mut ecm_diags = Vec::with_capacity(n_users);
    let mut true_dl = Vec::with_capacity(n_users);
    for k in 0..n_users {
        let user = draw_user_channel(geom, scen, rng);
        let dl_paths = make_dl_params(&user, rng);
        let obs = simulate_ul_observation(geom, &user, k, rng);
        let est = estimate(&obs, geom, nomp_cfg);
        let h_hat = reconstruct_dl(&est, scen.eta, geom, s_eval);
        let ecm = if est.paths.is_empty() {
            ErrorCovariance::zeros(geom.n_antennas)
        } else {
            let fim = observed_fim(&obs, &est, geom, geom.noise_var_ul)
                .expect("non-empty estimate");
            let jac = dl_jacobian(&est, scen.eta, geom, s_eval).expect("non-empty estimate");
            estimate_ecm(&fim, &jac).unwrap_or_else(|_| ErrorCovariance::zeros(geom.n_antennas))
        };
        channels.push(h_hat);
        ecm_diags.push(ecm.diag_vector());
        true_dl.push(channel_vector(geom, &dl_paths, Band::Dl, s_eval));
    }
    TrialPipeline { channels, ecm_diags, true_dl }
}

/// Maximum ratio transmission: private blocks along the channel estimates,
/// equal power split, no common or radar power.
pub fn mrt_precoder(channels: &[DVector<C64>], dims: Dims) -> PrecoderVector {
    let mut p = PrecoderVector::zeros(dims);
    for (k, h) in channels.iter().enumerate() {
        let norm = h.norm();
        if norm > 0.0 {
            p.set_block(1 + k, &(h / C64::new(norm, 0.0)));
        }
    }
    p.normalize();
    p
}

/// Regularized zero forcing: columns of `H (H^H H + K sigma^2/P I)^{-1}`,
/// normalized per user, equal power split.
pub fn rzf_precoder(channels: &[DVector<C64>], dims: Dims, sigma_over_p: f64) -> PrecoderVector {
    let k_users = dims.n_users;
    let n = dims.n_antennas;
    let h_mat = nalgebra::DMatrix::<C64>::from_fn(n, k_users, |i, k| channels[k][i]);
    let gram = h_mat.adjoint() * &h_mat
        + nalgebra::DMatrix::identity(k_users, k_users)
            * C64::new(k_users as f64 * sigma_over_p, 0.0);
    let inv = gram.try_inverse().expect("regularized Gram is invertible");
    let cols = h_mat * inv;
    let mut p = PrecoderVector::zeros(dims);
    for k in 0..k_users {
        let col = cols.column(k).clone_owned();
        let norm = col.norm();
        if norm > 0.0 {
            p.set_block(1 + k, &(col / C64::new(norm, 0.0)));
        }
    }
    p.normalize();
    p
}

struct PointSetup {
    snr_db: f64,
    t_db: f64,
    geom: SystemGeometry,
    sigma_over_p: f64,
    sensing: SensingSpec,
}

fn sweep_points(cfg: &ExperimentConfig) -> Vec<(f64, f64)> {
    match cfg.run.sweep {
        Sweep::Tmse => cfg
            .sensing
            .t_mse_db
            .iter()
            .map(|&t| (cfg.scenario.snr_db[0], t))
            .collect(),
        Sweep::Scnr => cfg
            .sensing
            .t_scnr_db
            .iter()
            .map(|&t| (cfg.scenario.snr_db[0], t))
            .collect(),
        Sweep::Snr => {
            let t = if cfg.sensing.variant == "scnr" {
                cfg.sensing.t_scnr_db[0]
            } else {
                cfg.sensing.t_mse_db[0]
            };
            cfg.scenario.snr_db.iter().map(|&s| (s, t)).collect()
        }
    }
}

fn point_setup(cfg: &ExperimentConfig, snr_db: f64, t_db: f64) -> PointSetup {
    let ul_snr_db = cfg.scenario.ul_snr_db.unwrap_or(snr_db);
    let geom = cfg.geometry.to_geometry(10f64.powf(-ul_snr_db / 10.0));
    let sigma_over_p = 10f64.powf(-snr_db / 10.0);
    let targets_rad: Vec<f64> = cfg
        .sensing
        .target_angles_deg
        .iter()
        .map(|d| d.to_radians())
        .collect();
    let sensing = if cfg.sensing.variant == "scnr" {
        let dims = Dims::new(geom.n_antennas, cfg.scenario.users, cfg.scenario.radar_streams);
        let targets: Vec<(C64, f64)> =
            targets_rad.iter().map(|&t| (C64::new(1.0, 0.0), t)).collect();
        let clutter: Vec<(C64, f64)> = cfg
            .sensing
            .clutter
            .iter()
            .map(|&(b, a)| (C64::new(b, 0.0), a.to_radians()))
            .collect();
        let matrices =
            build_scnr(dims, &targets, &clutter, cfg.sensing.sigma_r_sq, cfg.solver.power);
        SensingSpec::Scnr { matrices, t_scnr: 10f64.powf(t_db / 10.0) }
    } else {
        let angles = uniform_angle_grid(cfg.sensing.constraint_grid);
        let target = target_pattern(
            &angles,
            &targets_rad,
            cfg.sensing.window_halfwidth_deg.to_radians(),
        );
        let grid = beam_matrices(geom.n_antennas, &angles, &target, cfg.solver.power);
        SensingSpec::BeampatternMse { grid, t_mse_norm: 10f64.powf(t_db / 10.0) }
    };
    PointSetup { snr_db, t_db, geom, sigma_over_p, sensing }
}

struct MethodRun {
    precoder: PrecoderVector,
    nu_star: f64,
    iters: usize,
    feasible: bool,
    achieved: f64,
}

fn run_method(
    method: Method,
    setup: &PointSetup,
    cfg: &ExperimentConfig,
    pipeline: &TrialPipeline,
    blocks_ecm: &SinrBlocks,
    dims: Dims,
) -> MethodRun {
    let targets_rad: Vec<f64> = cfg
        .sensing
        .target_angles_deg
        .iter()
        .map(|d| d.to_radians())
        .collect();
    let mut scfg = cfg.solver;
    match method {
        Method::Mrt | Method::Rzf => {
            let p = if method == Method::Mrt {
                mrt_precoder(&pipeline.channels, dims)
            } else {
                rzf_precoder(&pipeline.channels, dims, setup.sigma_over_p)
            };
            let achieved = setup.sensing.achieved(&p.data);
            let feasible = setup.sensing.is_feasible(achieved);
            MethodRun { precoder: p, nu_star: 0.0, iters: 0, feasible, achieved }
        }
        _ => {
            scfg.use_rs = method != Method::NoRs;
            scfg.use_ecm = method != Method::RsNoEcm;
            scfg.radar_only = method == Method::RadarOnly;
            let blocks;
            let solve_blocks = if scfg.use_ecm {
                blocks_ecm
            } else {
                blocks = build_sinr_blocks(
                    &pipeline.channels,
                    &pipeline.ecm_diags,
                    setup.sigma_over_p,
                    dims,
                    false,
                )
                .expect("dimensions already validated");
                &blocks
            };
            let p0 = mr_superposition_init(&pipeline.channels, &targets_rad, dims, scfg.use_rs);
            let sol = solve(solve_blocks, &setup.sensing, &scfg, &p0);
            MethodRun {
                precoder: sol.precoder,
                nu_star: sol.nu_star,
                iters: sol.diagnostics.max_inner_iters,
                feasible: sol.feasible,
                achieved: sol.achieved,
            }
        }
    }
}

/// Run the full experiment. Rows come back sorted by (method, sweep point,
/// trial); identical configs and seeds produce identical tables regardless of
/// the worker count.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let methods = cfg.methods()?;
    let started = std::time::Instant::now();
    let points = sweep_points(cfg);
    let dims = Dims::new(
        cfg.geometry.n_antennas,
        cfg.scenario.users,
        cfg.scenario.radar_streams,
    );
    let scen = ScenarioConfig {
        l_min: cfg.scenario.l_min,
        l_max: cfg.scenario.l_max,
        theta_max_deg: cfg.scenario.theta_max_deg,
        eta: cfg.scenario.eta,
    };
    let pattern_angles = uniform_angle_grid(cfg.sensing.pattern_grid);
    let targets_rad: Vec<f64> = cfg
        .sensing
        .target_angles_deg
        .iter()
        .map(|d| d.to_radians())
        .collect();
    let mainlobe = cfg.sensing.mainlobe_halfwidth_deg.to_radians();

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut precoders: Vec<(String, usize, usize, Vec<C64>)> = Vec::new();
    let mut patterns: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();

    struct MethodEval {
        method: Method,
        se_sum: f64,
        se_common: f64,
        achieved: f64,
        sidelobe_db: f64,
        nu_star: f64,
        iters: usize,
        feasible: bool,
        wall_ms: u64,
        pattern_gain: Vec<f64>,
        precoder: Option<Vec<C64>>,
    }

    for (pt_idx, &(snr_db, t_db)) in points.iter().enumerate() {
        let setup = point_setup(cfg, snr_db, t_db);
        let keep_pattern = pt_idx == 0;
        let trial_outputs: Vec<Vec<MethodEval>> = (0..cfg.run.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(cfg.run.seed, trial);
                let pipeline =
                    run_pipeline(&setup.geom, &scen, &cfg.nomp, cfg.scenario.users, &mut rng);
                let blocks_ecm = build_sinr_blocks(
                    &pipeline.channels,
                    &pipeline.ecm_diags,
                    setup.sigma_over_p,
                    dims,
                    true,
                )
                .expect("dimensions already validated");
                methods
                    .iter()
                    .map(|&m| {
                        let t0 = std::time::Instant::now();
                        let mr = run_method(m, &setup, cfg, &pipeline, &blocks_ecm, dims);
                        let wall_ms = t0.elapsed().as_millis() as u64;
                        // evaluation always uses the covariance-aware blocks
                        let (se_common, se_private) = se_lower_bound(&mr.precoder, &blocks_ecm);
                        let se_sum = se_common + se_private.iter().sum::<f64>();
                        let pattern =
                            beam_pattern(&mr.precoder, cfg.solver.power, &pattern_angles);
                        let sidelobe_db =
                            sidelobe_suppression(&pattern, &targets_rad, mainlobe)
                                .unwrap_or(f64::NAN);
                        MethodEval {
                            method: m,
                            se_sum,
                            se_common,
                            achieved: mr.achieved,
                            sidelobe_db,
                            nu_star: mr.nu_star,
                            iters: mr.iters,
                            feasible: mr.feasible,
                            wall_ms,
                            pattern_gain: if keep_pattern { pattern.gain } else { Vec::new() },
                            precoder: cfg.run.dump_precoders.then(|| {
                                mr.precoder.data.iter().cloned().collect()
                            }),
                        }
                    })
                    .collect()
            })
            .collect();

        // deterministic row assembly in (method, trial) order
        for &m in &methods {
            let mut mean_gain = vec![0.0f64; pattern_angles.len()];
            for (trial, per_method) in trial_outputs.iter().enumerate() {
                let ev = per_method
                    .iter()
                    .find(|e| e.method == m)
                    .expect("method present");
                if keep_pattern {
                    for (acc, g) in mean_gain.iter_mut().zip(ev.pattern_gain.iter()) {
                        *acc += g / cfg.run.trials as f64;
                    }
                }
                rows.push(ResultRow {
                    method: m.name().into(),
                    snr_db,
                    t_mse_db: t_db,
                    trial,
                    se_sum: ev.se_sum,
                    se_common: ev.se_common,
                    mse_achieved_db: 10.0 * ev.achieved.max(1e-300).log10(),
                    sidelobe_db: ev.sidelobe_db,
                    nu_star: ev.nu_star,
                    iters: ev.iters,
                    feasible: ev.feasible,
                    wall_ms: if cfg.run.timing { ev.wall_ms } else { 0 },
                });
                if let Some(p) = &ev.precoder {
                    precoders.push((m.name().into(), pt_idx, trial, p.clone()));
                }
            }
            if keep_pattern {
                patterns.push((m.name().into(), pattern_angles.clone(), mean_gain));
            }
        }
    }

    rows.sort_by(|a, b| {
        (a.method.as_str(), point_key(cfg, a), a.trial).partial_cmp(&(
            b.method.as_str(),
            point_key(cfg, b),
            b.trial,
        ))
        .unwrap()
    });

    let summary = summarize(cfg, &points, &rows, started.elapsed().as_millis() as u64);
    Ok(RunOutput { rows, summary, patterns, precoders })
}

fn point_key(cfg: &ExperimentConfig, r: &ResultRow) -> f64 {
    match cfg.run.sweep {
        Sweep::Snr => r.snr_db,
        _ => r.t_mse_db,
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    points: &[(f64, f64)],
    rows: &[ResultRow],
    elapsed_ms: u64,
) -> RunSummary {
    let mut out = Vec::new();
    let methods: Vec<String> = cfg.run.methods.clone();
    for m in &methods {
        for &(snr_db, t_db) in points {
            let cell: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.method == *m && r.snr_db == snr_db && r.t_mse_db == t_db)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let n = cell.len() as f64;
            let mean = cell.iter().map(|r| r.se_sum).sum::<f64>() / n;
            let var = cell.iter().map(|r| (r.se_sum - mean).powi(2)).sum::<f64>()
                / (n - 1.0).max(1.0);
            out.push(SummaryRow {
                method: m.clone(),
                snr_db,
                t_mse_db: t_db,
                trials: cell.len(),
                se_sum_mean: mean,
                se_sum_std: var.sqrt(),
                mse_achieved_db_mean: cell.iter().map(|r| r.mse_achieved_db).sum::<f64>() / n,
                sidelobe_db_mean: cell.iter().map(|r| r.sidelobe_db).sum::<f64>() / n,
                n_feasible: cell.iter().filter(|r| r.feasible).count(),
            });
        }
    }
    RunSummary { rows: out, elapsed_ms }
}

/// CSV columns, in [`ResultRow`] field order.
pub const CSV_HEADER: &str =
    "method,snr_db,t_mse_db,trial,se_sum,se_common,mse_achieved_db,sidelobe_db,nu_star,iters,feasible,wall_ms";

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.snr_db,
            r.t_mse_db,
            r.trial,
            r.se_sum,
            r.se_common,
            r.mse_achieved_db,
            r.sidelobe_db,
            r.nu_star,
            r.iters,
            r.feasible,
            r.wall_ms
        )?;
    }
    Ok(())
}

/// Write all outputs of a run into `out_dir`.
pub fn write_outputs(out: &RunOutput, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    write_results_csv(&out.rows, &out_dir.join("results.csv"))?;
    let json = serde_json::to_string_pretty(&out.summary)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    for (method, angles, gain) in &out.patterns {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(out_dir.join(format!("pattern_{method}.csv")))?,
        );
        writeln!(f, "angle_deg,gain_db")?;
        let peak = gain.iter().cloned().fold(f64::MIN, f64::max).max(f64::MIN_POSITIVE);
        for (a, g) in angles.iter().zip(gain.iter()) {
            let db = (10.0 * (g / peak).log10()).max(crate::eval::PATTERN_DB_FLOOR);
            writeln!(f, "{},{}", a.to_degrees(), db)?;
        }
    }
    if !out.precoders.is_empty() {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(out_dir.join("precoders.csv"))?,
        );
        writeln!(f, "method,point,trial,idx,re,im")?;
        for (method, point, trial, data) in &out.precoders {
            for (idx, v) in data.iter().enumerate() {
                writeln!(f, "{method},{point},{trial},{idx},{},{}", v.re, v.im)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_headline_scenario() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.geometry.n_antennas, 8);
        assert_eq!(cfg.scenario.users, 4);
        assert_eq!(cfg.scenario.radar_streams, 4);
        assert_eq!(cfg.scenario.eta, 0.9);
        assert_eq!(cfg.scenario.snr_db, vec![35.0]);
        assert_eq!(cfg.sensing.t_mse_db, vec![-11.0]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[run]\ntrials = 0\n").unwrap_err();
        assert!(err.to_string().contains("run.trials"));
        let err = ExperimentConfig::from_toml("[sensing]\nvariant = 'foo'\n").unwrap_err();
        assert!(err.to_string().contains("sensing.variant"));
        let err = ExperimentConfig::from_toml("[run]\nmethods = ['bogus']\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn mrt_and_rzf_coincide_for_single_user() {
        use rand::SeedableRng;
        let dims = Dims::new(4, 1, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let h = DVector::from_fn(4, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0));
        let mrt = mrt_precoder(&[h.clone()], dims);
        let rzf = rzf_precoder(&[h], dims, 0.1);
        let cos = mrt.data.dotc(&rzf.data).norm();
        assert!(cos > 1.0 - 1e-10);
    }

    #[test]
    fn rzf_approaches_mrt_at_low_snr() {
        use rand::SeedableRng;
        let dims = Dims::new(6, 3, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let channels: Vec<DVector<C64>> = (0..3)
            .map(|_| DVector::from_fn(6, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0)))
            .collect();
        let mrt = mrt_precoder(&channels, dims);
        let rzf = rzf_precoder(&channels, dims, 1e6);
        let cos = mrt.data.dotc(&rzf.data).norm();
        assert!(cos > 0.999, "cosine {cos}");
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let mut cfg = ExperimentConfig::from_toml("").unwrap();
        cfg.run.trials = 2;
        cfg.run.methods = vec!["rs".into()];
        cfg.geometry.n_subcarriers = 16;
        cfg.scenario.users = 2;
        cfg.scenario.radar_streams = 1;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.se_sum.to_bits(), y.se_sum.to_bits());
            assert_eq!(x.mse_achieved_db.to_bits(), y.mse_achieved_db.to_bits());
            assert_eq!(x.nu_star.to_bits(), y.nu_star.to_bits());
        }
    }
}
