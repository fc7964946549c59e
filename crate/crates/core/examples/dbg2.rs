use isac_core::channel::*;
use isac_core::ecm::*;
use isac_core::eval::*;
use isac_core::nomp::*;
use isac_core::solver::*;
use nalgebra::DVector;
use rand::SeedableRng;

fn pipeline(geom: &SystemGeometry, scen: &ScenarioConfig, dims: Dims, trial: u64, eta: f64)
    -> (Vec<DVector<C64>>, Vec<DVector<f64>>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    rng.set_stream(trial);
    let ncfg = NompConfig::default();
    let s_eval = geom.center_subcarrier();
    let (mut chans, mut ecms) = (Vec::new(), Vec::new());
    for k in 0..dims.n_users {
        let mut user = draw_user_channel(geom, scen, &mut rng);
        user.eta = vec![eta; user.n_paths()];
        let _dl = make_dl_params(&user, &mut rng);
        let obs = simulate_ul_observation(geom, &user, k, &mut rng);
        let est = estimate(&obs, geom, &ncfg);
        let h_hat = reconstruct_dl(&est, eta, geom, s_eval);
        let ecm = if est.paths.is_empty() { ErrorCovariance::zeros(geom.n_antennas) } else {
            let fim = observed_fim(&obs, &est, geom, geom.noise_var_ul).unwrap();
            let jac = dl_jacobian(&est, eta, geom, s_eval).unwrap();
            estimate_ecm(&fim, &jac).unwrap()
        };
        chans.push(h_hat);
        ecms.push(ecm.diag_vector());
    }
    (chans, ecms)
}

fn main() {
    let geom = SystemGeometry { noise_var_ul: 10f64.powf(-2.5), ..SystemGeometry::default() };
    let dims = Dims::new(8, 4, 4);
    let scen = ScenarioConfig::default();
    let sigma_over_p = 10f64.powf(-3.5);
    let angles = uniform_angle_grid(181);
    let targets = [0.0f64];
    let tgt = target_pattern(&angles, &targets, 5f64.to_radians());

    for (nu_max, t_max, use_rs) in [(1e3, 100, true), (1e4, 100, true), (1e5, 100, true), (1e4, 300, true), (1e4, 100, false)] {
        let mut sl_sum = 0.0; let mut mse_sum = 0.0; let mut worst: f64 = -100.0;
        let nsl = 20;
        for t in 0..nsl {
            let (chans, ecms) = pipeline(&geom, &scen, dims, 1000 + t, 0.9);
            let blocks = build_sinr_blocks(&chans, &ecms, sigma_over_p, dims, true).unwrap();
            let grid = beam_matrices(dims.n_antennas, &angles, &tgt, 1.0);
            let sensing = SensingSpec::BeampatternMse { grid, t_mse_norm: 10f64.powf(-1.1) };
            let p0 = mr_superposition_init(&chans, &targets, dims, use_rs);
            let cfg = SolverConfig { radar_only: true, nu_max, t_max, use_rs, ..SolverConfig::default() };
            let sol = solve(&blocks, &sensing, &cfg, &p0);
            let pat = beam_pattern(&sol.precoder, 1.0, &uniform_angle_grid(721));
            let sl = sidelobe_suppression(&pat, &targets, 10f64.to_radians()).unwrap();
            sl_sum += sl; mse_sum += 10.0 * sol.achieved.log10(); worst = worst.max(sl);
        }
        println!("nu_max={nu_max:.0e} t_max={t_max} rs={use_rs}: mean sidelobe {:.2} dB (worst {:.2}), mean mse {:.2} dB", sl_sum / nsl as f64, worst, mse_sum / nsl as f64);
    }
}
