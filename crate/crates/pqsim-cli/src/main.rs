//! Command-line front end for the spin-squeezing pipeline: simulation,
//! estimation over recorded traces, metric reports and plot-ready scans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pqsim::config::ExperimentConfig;
use pqsim::error::Error;
use pqsim::harness::{
    self, default_coherence_scan, default_window_scan, nominal_params, run_calibration,
};
use pqsim::io::{self, PhaseCurveRow};
use pqsim::metrics::{
    enhancement_db, pcss_reference, phase_grid, sss_reference, MetricsReport, PhaseSensitivity,
    SubtractionMode,
};

#[derive(Parser)]
#[command(
    name = "pqsim",
    about = "Simulate and analyze QND probing of a precessing collective atomic spin",
    version
)]
struct Cli {
    /// Configuration file (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "pqsim-out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Covariance mode override: raw | subtracted.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Phase grid points override.
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment and analyze the simulated traces.
    Simulate,
    /// Readout-noise calibration: repeat the measurement without atoms.
    Calibrate,
    /// Analyze externally supplied traces (CSV in the simulate format).
    Analyze {
        /// Trace CSV file.
        #[arg(long)]
        traces: PathBuf,
    },
    /// Recompute the metric report from a conditional-statistics document.
    Metrics {
        /// Conditional statistics document.
        #[arg(long)]
        stats: PathBuf,
    },
    /// Planar squeezing versus in-plane coherence (atom-number scan).
    ScanCoherence,
    /// Total conditional variance versus estimation window length.
    ScanWindow,
    /// Phase-sensitivity curves of the analyzed state against PCSS and SSS
    /// references. Reads a statistics document when given one, otherwise
    /// predicts the statistics from the configuration.
    PhaseCurve {
        /// Conditional statistics document (optional).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let mut cfg = ExperimentConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = SubtractionMode::parse(mode)
            .ok_or_else(|| CliError::Usage(format!("mode must be raw or subtracted, got {mode}")))?;
    }
    if let Some(grid) = cli.grid {
        cfg.grid_points = grid;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::write(dir.join("resolved.conf"), cfg.render())
        .map_err(|e| CliError::Runtime(format!("cannot write resolved.conf: {e}")))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let (with_traces, no_traces) = harness::simulate_all_traces(&cfg)?;
            let trace_path = cli.out.join("traces.csv");
            io::write_traces(&trace_path, &with_traces, &no_traces)?;
            // Analyze what was actually persisted, so analyzing the written
            // file afterwards reproduces these outputs byte for byte.
            let (with_rt, no_rt) = io::read_traces(&trace_path, cfg.t_e())?;
            let analysis = harness::analyze_traces(&cfg, &with_rt, &no_rt)?;
            io::write_conditional_stats(
                &cli.out.join("conditional_stats.txt"),
                &analysis.stats,
                &analysis.moments,
            )?;
            io::write_metrics(
                &cli.out.join("metrics.txt"),
                &analysis.report,
                &analysis.moments,
            )?;
            write_resolved(&cli.out, &cfg)?;
            println!(
                "simulate: {} trials, xi_par_sq = {:.4} +/- {:.4}, entangled = {}",
                cfg.trials,
                analysis.report.xi_par_sq.value,
                analysis.report.xi_par_sq.std_err,
                analysis.report.entangled
            );
            Ok(())
        }
        Command::Calibrate => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let gamma_zero = run_calibration(&cfg)?;
            let mut text = String::new();
            use std::fmt::Write as _;
            let _ = writeln!(
                text,
                "gamma_zero = {:.8e} {:.8e} {:.8e} {:.8e}",
                gamma_zero[(0, 0)],
                gamma_zero[(0, 1)],
                gamma_zero[(1, 0)],
                gamma_zero[(1, 1)]
            );
            std::fs::write(cli.out.join("gamma_zero.txt"), text)
                .map_err(|e| CliError::Runtime(format!("cannot write gamma_zero.txt: {e}")))?;
            write_resolved(&cli.out, &cfg)?;
            println!(
                "calibrate: gamma_zero diag = [{:.4e}, {:.4e}] spins^2",
                gamma_zero[(0, 0)],
                gamma_zero[(1, 1)]
            );
            Ok(())
        }
        Command::Analyze { traces } => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let (with_traces, no_traces) = io::read_traces(traces, cfg.t_e())?;
            let analysis = harness::analyze_traces(&cfg, &with_traces, &no_traces)?;
            io::write_conditional_stats(
                &cli.out.join("conditional_stats.txt"),
                &analysis.stats,
                &analysis.moments,
            )?;
            io::write_metrics(
                &cli.out.join("metrics.txt"),
                &analysis.report,
                &analysis.moments,
            )?;
            write_resolved(&cli.out, &cfg)?;
            println!(
                "analyze: {} with-atom traces, xi_par_sq = {:.4}",
                with_traces.len(),
                analysis.report.xi_par_sq.value
            );
            Ok(())
        }
        Command::Metrics { stats } => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let (stats, moments) = io::read_conditional_stats(stats)?;
            let report = MetricsReport::compute(
                &moments,
                &stats.gamma_cond,
                &stats.gamma_zero,
                &stats.std_err,
                cfg.mode,
                cfg.grid_points,
            )?;
            io::write_metrics(&cli.out.join("metrics.txt"), &report, &moments)?;
            write_resolved(&cli.out, &cfg)?;
            println!(
                "metrics: xi_par_sq = {:.4}, xi_e_sq = {:.4}, entangled = {}",
                report.xi_par_sq.value, report.xi_e_sq.value, report.entangled
            );
            Ok(())
        }
        Command::ScanCoherence => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let scan = harness::scan_coherence(&cfg, &default_coherence_scan())?;
            io::write_scan(&cli.out.join("scan_coherence.csv"), &scan, "n_atoms")?;
            write_resolved(&cli.out, &cfg)?;
            for p in &scan.points {
                println!(
                    "n_atoms = {:.3e}: f_par = {:.3e}, xi_par_sq = {:.3} +/- {:.3}",
                    p.axis, p.f_par, p.xi_par_sq.value, p.xi_par_sq.std_err
                );
            }
            Ok(())
        }
        Command::ScanWindow => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let scan = harness::scan_window(&cfg, &default_window_scan())?;
            io::write_scan(&cli.out.join("scan_window.csv"), &scan, "window_us")?;
            write_resolved(&cli.out, &cfg)?;
            for p in &scan.points {
                println!(
                    "window = {:.0} us: Tr(gamma_cond) = {:.4e} spins^2",
                    p.axis, p.tr_gamma_cond
                );
            }
            Ok(())
        }
        Command::PhaseCurve { stats } => {
            let cfg = load_config(cli)?;
            prepare_out(&cli.out)?;
            let (gamma_cond, gamma_zero, moments) = match stats {
                Some(path) => {
                    let (stats, moments) = io::read_conditional_stats(path)?;
                    (stats.gamma_cond, stats.gamma_zero, moments)
                }
                None => {
                    // No measured statistics: predict them from the model.
                    let pred = harness::predict_stats(&cfg)?;
                    let eta_sc = harness::eta_sc_at_epoch(&cfg);
                    let f_par = cfg.eta_dec * eta_sc * cfg.n_atoms;
                    let theta = pred.mean_te.z.atan2(pred.mean_te.y);
                    let moments = pqsim::metrics::PlanarMoments::new(
                        f_par * theta.cos(),
                        f_par * theta.sin(),
                        pred.gamma_cond[(0, 0)],
                        pred.gamma_cond[(1, 1)],
                        pred.gamma_cond[(0, 1)],
                        cfg.n_atoms,
                        eta_sc,
                        cfg.p_return,
                    )?;
                    (pred.gamma_cond, pred.gamma_zero_m2, moments)
                }
            };
            if !(moments.f_par > 0.0) {
                return Err(Error::UndefinedCoherence(moments.f_par).into());
            }
            let adjusted = match cfg.mode {
                SubtractionMode::Raw => gamma_cond,
                SubtractionMode::ReadoutSubtracted => gamma_cond - gamma_zero,
            };
            let (aligned_moments, aligned_gamma) =
                pqsim::metrics::align_coherence(&moments, &adjusted)?;
            let pqs = PhaseSensitivity::new(aligned_moments.mean_y, 0.0, aligned_gamma);
            let pcss = pcss_reference(moments.n_atoms_in);
            let eta_sc = if moments.n_atoms_in > 0.0 && cfg.p_return < 1.0 {
                // Recover eta_sc from n_tilde = (eta + p (1 - eta)) N.
                (((moments.n_tilde / moments.n_atoms_in) - cfg.p_return)
                    / (1.0 - cfg.p_return))
                    .clamp(0.0, 1.0)
            } else {
                1.0
            };
            let n_total = cfg.n_photons_v * (cfg.window_us / cfg.pulse_period_us).round();
            let sss = sss_reference(
                moments.n_atoms_in,
                pqsim::metrics::DEFAULT_SSS_COUPLING,
                n_total,
                eta_sc,
            );
            let grid = phase_grid(cfg.grid_points);
            let db_pqs = enhancement_db(&pqs, &pcss, &grid);
            let db_sss = enhancement_db(&sss, &pcss, &grid);
            let rows: Vec<PhaseCurveRow> = grid
                .iter()
                .enumerate()
                .map(|(i, &phi)| PhaseCurveRow {
                    phi,
                    pqs: pqs.variance(phi).ok(),
                    pcss: pcss.variance(phi).ok(),
                    sss: sss.variance(phi).ok(),
                    db_pqs: db_pqs[i].1,
                    db_sss: db_sss[i].1,
                })
                .collect();
            io::write_phase_curve(&cli.out.join("phase_curve.csv"), &rows)?;
            write_resolved(&cli.out, &cfg)?;
            let min = rows
                .iter()
                .filter_map(|r| r.pqs.map(|v| v.sqrt()))
                .fold(f64::INFINITY, f64::min);
            println!("phase-curve: min delta-phi = {min:.4e} rad over {} points", rows.len());
            Ok(())
        }
    }
}
