use isac_core::channel::*;
use isac_core::ecm::*;
use isac_core::eval::*;
use isac_core::nomp::*;
use isac_core::solver::*;
use nalgebra::DVector;
use rand::SeedableRng;

fn pipeline(geom: &SystemGeometry, scen: &ScenarioConfig, dims: Dims, trial: u64, eta: f64)
    -> (Vec<DVector<C64>>, Vec<DVector<f64>>, Vec<DVector<C64>>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    rng.set_stream(trial);
    let ncfg = NompConfig::default();
    let s_eval = geom.center_subcarrier();
    let (mut chans, mut ecms, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..dims.n_users {
        let mut user = draw_user_channel(geom, scen, &mut rng);
        user.eta = vec![eta; user.n_paths()];
        let dl_paths = make_dl_params(&user, &mut rng);
        let obs = simulate_ul_observation(geom, &user, k, &mut rng);
        let est = estimate(&obs, geom, &ncfg);
        let h_hat = reconstruct_dl(&est, eta, geom, s_eval);
        let ecm = if est.paths.is_empty() {
            ErrorCovariance::zeros(geom.n_antennas)
        } else {
            let fim = observed_fim(&obs, &est, geom, geom.noise_var_ul).unwrap();
            let jac = dl_jacobian(&est, eta, geom, s_eval).unwrap();
            estimate_ecm(&fim, &jac).unwrap()
        };
        truth.push(channel_vector(geom, &dl_paths, Band::Dl, s_eval));
        chans.push(h_hat);
        ecms.push(ecm.diag_vector());
    }
    (chans, ecms, truth)
}

fn main() {
    let geom = SystemGeometry { noise_var_ul: 10f64.powf(-2.5), ..SystemGeometry::default() };
    let dims = Dims::new(8, 4, 4);
    let scen = ScenarioConfig::default();

    // ECM calibration at eta = 1
    let (mut pred, mut emp) = (0.0, 0.0);
    let trials = 50;
    for t in 0..trials {
        let (chans, ecms, truth) = pipeline(&geom, &scen, dims, t, 1.0);
        for k in 0..dims.n_users {
            pred += ecms[k].sum() / 8.0;
            emp += (&chans[k] - &truth[k]).norm_squared() / 8.0;
        }
    }
    println!("ECM calibration eta=1, UL SNR 25: pred {:.3e} emp {:.3e} ratio {:.2}", pred/(trials as f64*4.0), emp/(trials as f64*4.0), pred/emp);

    // radar-only sidelobe at nu_max, single target 0 deg
    let sigma_over_p = 10f64.powf(-3.5);
    let angles = uniform_angle_grid(181);
    let targets = [0.0f64];
    let tgt = target_pattern(&angles, &targets, 5f64.to_radians());
    let mut sl_sum = 0.0; let mut mse_sum = 0.0;
    let nsl = 20;
    for t in 0..nsl {
        let (chans, ecms, _) = pipeline(&geom, &scen, dims, 1000 + t, 0.9);
        let blocks = build_sinr_blocks(&chans, &ecms, sigma_over_p, dims, true).unwrap();
        let grid = beam_matrices(dims.n_antennas, &angles, &tgt, 1.0);
        let sensing = SensingSpec::BeampatternMse { grid, t_mse_norm: 10f64.powf(-1.1) };
        let p0 = mr_superposition_init(&chans, &targets, dims, true);
        let cfg = SolverConfig { radar_only: true, ..SolverConfig::default() };
        let sol = solve(&blocks, &sensing, &cfg, &p0);
        let pat = beam_pattern(&sol.precoder, 1.0, &uniform_angle_grid(721));
        let sl = sidelobe_suppression(&pat, &targets, 10f64.to_radians()).unwrap();
        sl_sum += sl; mse_sum += 10.0 * sol.achieved.log10();
    }
    println!("radar-only: mean sidelobe {:.2} dB, mean mse {:.2} dB", sl_sum / nsl as f64, mse_sum / nsl as f64);

    // bisection behavior at tight T = -13 dB
    for t in 0..5 {
        let (chans, ecms, _) = pipeline(&geom, &scen, dims, 2000 + t, 0.9);
        let blocks = build_sinr_blocks(&chans, &ecms, sigma_over_p, dims, true).unwrap();
        let grid = beam_matrices(dims.n_antennas, &angles, &tgt, 1.0);
        let t_norm = 10f64.powf(-1.3);
        let sensing = SensingSpec::BeampatternMse { grid, t_mse_norm: t_norm };
        let p0 = mr_superposition_init(&chans, &targets, dims, true);
        let cfg = SolverConfig::default();
        let sol = solve(&blocks, &sensing, &cfg, &p0);
        let se = se_sum_lower(&sol.precoder.data, &blocks, true);
        let slack = sol.nu_star * (sol.achieved - t_norm).abs();
        println!("T=-13: trial {t}: se={se:.2} mse={:.2}dB nu*={:.2} feas={} outer={} slack={:.2e} bound={:.2e}",
            10.0*sol.achieved.log10(), sol.nu_star, sol.feasible, sol.diagnostics.outer.len(), slack, 1e-3*(1.0+sol.nu_star));
    }
}
