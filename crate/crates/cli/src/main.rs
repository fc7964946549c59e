//! Experiment runner for the FDD MIMO-ISAC simulator.
//!
//! Reads a TOML experiment config (all fields optional; an empty config runs
//! the default scenario: N=8, K=4, M=4, eta=0.9, SNR 35 dB, target MSE
//! -11 dB), executes the seeded Monte-Carlo sweep and writes results.csv,
//! summary.json and per-method beam-pattern CSVs.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error.

use clap::{Parser, Subcommand};
use isac_core::harness::{self, ExperimentConfig, HarnessError, Sweep};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "isac-sim", version, about = "FDD MIMO-ISAC precoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment sweep from a config file.
    Run {
        /// TOML experiment config; omit to run the default scenario.
        config: Option<PathBuf>,
        /// Output directory for results.csv, summary.json and patterns.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the number of Monte-Carlo trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated methods: rs,rs_no_ecm,no_rs,radar_only,mrt,rzf.
        #[arg(long)]
        methods: Option<String>,
        /// Sweep axis: tmse, snr or scnr.
        #[arg(long)]
        sweep: Option<String>,
        /// Store every solved precoder in precoders.csv.
        #[arg(long)]
        dump_precoders: bool,
        /// Beam-pattern grid spacing in degrees.
        #[arg(long)]
        pattern_grid: Option<f64>,
        /// Record per-run wall times in the rows CSV (breaks byte-identical
        /// reproducibility of the output files).
        #[arg(long)]
        timing: bool,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        None => ExperimentConfig::from_toml(""),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            ExperimentConfig::from_toml(&text)
        }
    }
}

fn execute() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            trials,
            seed,
            methods,
            sweep,
            dump_precoders,
            pattern_grid,
            timing,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(t) = trials {
                cfg.run.trials = t;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(m) = methods {
                cfg.run.methods = m.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(s) = sweep {
                cfg.run.sweep = match s.as_str() {
                    "tmse" => Sweep::Tmse,
                    "snr" => Sweep::Snr,
                    "scnr" => Sweep::Scnr,
                    other => {
                        return Err(HarnessError::Config(format!(
                            "--sweep must be tmse, snr or scnr, got '{other}'"
                        )))
                    }
                };
            }
            if dump_precoders {
                cfg.run.dump_precoders = true;
            }
            if timing {
                cfg.run.timing = true;
            }
            if let Some(deg) = pattern_grid {
                if !(deg > 0.0 && deg <= 180.0) {
                    return Err(HarnessError::Config(
                        "--pattern-grid must be in (0, 180] degrees".into(),
                    ));
                }
                cfg.sensing.pattern_grid = (180.0 / deg).round() as usize + 1;
            }
            cfg.validate()?;

            let output = harness::run(&cfg)?;
            harness::write_outputs(&output, &out)?;

            println!(
                "{} rows over {} sweep point(s), {} trial(s) -> {}",
                output.rows.len(),
                output.summary.rows.len() / cfg.run.methods.len().max(1),
                cfg.run.trials,
                out.display()
            );
            println!(
                "{:<12} {:>8} {:>9} {:>16} {:>10} {:>12} {:>9}",
                "method", "snr_db", "t_db", "se_sum", "mse_db", "sidelobe_db", "feasible"
            );
            for s in &output.summary.rows {
                println!(
                    "{:<12} {:>8.1} {:>9.1} {:>8.3} ±{:>6.3} {:>10.2} {:>12.2} {:>6}/{:<3}",
                    s.method,
                    s.snr_db,
                    s.t_mse_db,
                    s.se_sum_mean,
                    s.se_sum_std,
                    s.mse_achieved_db_mean,
                    s.sidelobe_db_mean,
                    s.n_feasible,
                    s.trials
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::Io(_) => ExitCode::from(3),
            }
        }
    }
}
