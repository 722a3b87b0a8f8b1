//! Monte Carlo orchestration: repeated trials, calibration runs, scans
//! over atom number and window length.

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::analytic::{self, AnalyticPrediction};
use crate::config::{derive_seed, point_key, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    conditional_covariance, estimate_window, fit_classical_params, readout_noise, ClassicalParams,
    ConditionalStats, EnvelopeMode, FidFit,
};
use crate::metrics::{MetricsReport, PlanarMoments, ValueWithError};
use crate::probe::{simulate_trace, Trace};
use crate::spin::pcss_new;

/// Everything one Monte Carlo run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub with_traces: Vec<Trace>,
    pub no_traces: Vec<Trace>,
    pub stats: ConditionalStats,
    pub report: MetricsReport,
    pub fit: FidFit,
    pub moments: PlanarMoments,
}

/// Estimation-side results for externally supplied traces.
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub stats: ConditionalStats,
    pub report: MetricsReport,
    pub fit: FidFit,
    pub moments: PlanarMoments,
}

fn wrap_trial<T>(trial: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Trial {
        trial,
        source: Box::new(e),
    })
}

/// Number of pulse slots at or before the epoch.
fn pulses_before(cfg: &ExperimentConfig) -> usize {
    let mut n = 0usize;
    let period = cfg.pulse_period();
    loop {
        let t = (n as f64 + 0.5) * period;
        if t <= cfg.t_e() {
            n += 1;
        } else {
            break;
        }
    }
    n
}

/// Cumulative scattering survival at the epoch implied by the photon budget.
pub fn eta_sc_at_epoch(cfg: &ExperimentConfig) -> f64 {
    let n_pre = pulses_before(cfg) as f64;
    (-cfg.eta_per_photon * (cfg.n_photons_v + cfg.n_photons_h) * n_pre).exp()
}

/// Simulate all with-atom and no-atom traces for one configuration.
/// Trials run in parallel; per-trial seeds depend only on the master seed,
/// the stream label, the scan point and the trial index.
pub fn simulate_all_traces(cfg: &ExperimentConfig) -> Result<(Vec<Trace>, Vec<Trace>)> {
    cfg.validate()?;
    let pulse = cfg.pulse_config()?;
    let pk = point_key(cfg.n_atoms, cfg.window_us);
    let duration = cfg.duration();
    let t_e = cfg.t_e();

    let with: Vec<Trace> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = derive_seed(cfg.master_seed, "atoms", pk, trial as u64);
            let (n_eff, omega_eff) = trial_jitter(cfg, pk, trial as u64);
            let state0 = wrap_trial(trial, pcss_new(n_eff))?;
            let mut pcfg = pulse.clone();
            pcfg.larmor_omega = omega_eff;
            let (trace, _) = wrap_trial(trial, simulate_trace(&state0, &pcfg, duration, t_e, seed))?;
            Ok(trace)
        })
        .collect::<Result<_>>()?;

    let no: Vec<Trace> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = derive_seed(cfg.master_seed, "noatoms", pk, trial as u64);
            let state0 = wrap_trial(trial, pcss_new(0.0))?;
            let (trace, _) = wrap_trial(trial, simulate_trace(&state0, &pulse, duration, t_e, seed))?;
            Ok(trace)
        })
        .collect::<Result<_>>()?;

    Ok((with, no))
}

fn trial_jitter(cfg: &ExperimentConfig, pk: u64, trial: u64) -> (f64, f64) {
    let omega = cfg.larmor_omega();
    if cfg.atom_jitter_frac == 0.0 && cfg.larmor_jitter == 0.0 {
        return (cfg.n_atoms, omega);
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "jitter", pk, trial));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n_eff =
        (cfg.n_atoms * (1.0 + cfg.atom_jitter_frac * normal.sample(&mut rng))).max(0.0);
    let omega_eff = omega + cfg.larmor_jitter * normal.sample(&mut rng);
    (n_eff, omega_eff)
}

/// Estimation pipeline over already-available traces: classical fit,
/// two-window estimates, pooled conditional statistics, metrics.
pub fn analyze_traces(
    cfg: &ExperimentConfig,
    with_traces: &[Trace],
    no_traces: &[Trace],
) -> Result<AnalysisOutput> {
    cfg.validate()?;
    if !(cfg.n_atoms > 0.0) {
        return Err(Error::Config(
            "analysis needs n_atoms > 0; use run_calibration for no-atom runs".into(),
        ));
    }
    let fit = fit_classical_params(with_traces, cfg.g_rad_per_spin, cfg.envelope())?;
    let params = fit.params;
    let m1 = cfg.m1_window();
    let m2 = cfg.m2_window();
    let t_e = cfg.t_e();

    let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = with_traces
        .par_iter()
        .enumerate()
        .map(|(trial, trace)| {
            let e1 = wrap_trial(trial, estimate_window(trace, m1, t_e, &params, cfg.envelope()))?;
            let e2 = wrap_trial(trial, estimate_window(trace, m2, t_e, &params, cfg.envelope()))?;
            Ok((e1.vector(), e2.vector()))
        })
        .collect::<Result<_>>()?;

    let mut stats = conditional_covariance(&pairs)?;
    stats.gamma_zero = readout_noise(no_traces, m2, t_e, &params, cfg.envelope())?;

    let moments = pooled_moments(cfg, &pairs)?;
    let report = MetricsReport::compute(
        &moments,
        &stats.gamma_cond,
        &stats.gamma_zero,
        &stats.std_err,
        cfg.mode,
        cfg.grid_points,
    )?;

    Ok(AnalysisOutput {
        stats,
        report,
        fit,
        moments,
    })
}

/// Planar moments at the epoch, built from the estimation outputs alone so
/// simulation and re-analysis of serialized traces agree exactly:
/// the coherence magnitude comes from the deterministic decay budget and
/// the direction from the pooled window estimates.
fn pooled_moments(
    cfg: &ExperimentConfig,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<PlanarMoments> {
    let n = pairs.len() as f64;
    let mut m = Vector2::zeros();
    for (a, b) in pairs {
        m += (a + b) / 2.0;
    }
    m /= n;
    let eta_sc = eta_sc_at_epoch(cfg);
    let f_par = cfg.eta_dec * eta_sc * cfg.n_atoms;
    let theta = m[1].atan2(m[0]);
    PlanarMoments::new(
        f_par * theta.cos(),
        f_par * theta.sin(),
        0.0,
        0.0,
        0.0,
        cfg.n_atoms,
        eta_sc,
        cfg.p_return,
    )
}

impl ExperimentConfig {
    pub(crate) fn envelope(&self) -> EnvelopeMode {
        self.envelope_mode
    }
}

/// Full Monte Carlo run: simulate, then analyze in memory.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (with_traces, no_traces) = simulate_all_traces(cfg)?;
    let analysis = analyze_traces(cfg, &with_traces, &no_traces)?;
    Ok(RunOutput {
        with_traces,
        no_traces,
        stats: analysis.stats,
        report: analysis.report,
        fit: analysis.fit,
        moments: analysis.moments,
    })
}

/// Calibration run: the no-atom readout covariance on the M2 window, with
/// the estimator driven by the nominal configuration parameters.
pub fn run_calibration(cfg: &ExperimentConfig) -> Result<Matrix2<f64>> {
    cfg.validate()?;
    let mut cal = cfg.clone();
    cal.n_atoms = 0.0;
    let (_, no_traces) = simulate_all_traces(&cal)?;
    let params = nominal_params(cfg);
    readout_noise(&no_traces, cfg.m2_window(), cfg.t_e(), &params, cfg.envelope())
}

/// Classical parameters implied by the configuration: the Larmor frequency
/// and baseline are taken as configured and T2 is the emergent scattering
/// decay time period / (eta * photons per slot).
pub fn nominal_params(cfg: &ExperimentConfig) -> ClassicalParams {
    let load = cfg.eta_per_photon * (cfg.n_photons_v + cfg.n_photons_h);
    let t2 = if load > 0.0 {
        cfg.pulse_period() / load
    } else {
        cfg.t2_us * 1e-6
    };
    ClassicalParams {
        g: cfg.g_rad_per_spin,
        larmor_omega: cfg.larmor_omega(),
        t2,
        phi0: cfg.phi0_rad,
    }
}

/// Model-implied conditional statistics for this configuration (no Monte
/// Carlo), using the nominal classical parameters for the estimator maps.
pub fn predict_stats(cfg: &ExperimentConfig) -> Result<AnalyticPrediction> {
    cfg.validate()?;
    let state0 = pcss_new(cfg.n_atoms)?;
    analytic::predict(
        &state0,
        &cfg.pulse_config()?,
        cfg.duration(),
        cfg.t_e(),
        (cfg.m1_window(), cfg.m2_window()),
        &nominal_params(cfg),
    )
}

/// One scan point: metrics against the scanned axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub axis: f64,
    pub f_par: f64,
    pub xi_par_sq: ValueWithError,
    pub tr_gamma_cond: f64,
    pub entangled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub points: Vec<ScanPoint>,
}

/// Planar squeezing versus in-plane coherence, varied through the atom
/// number. Seeds key on the atom number, so scan order cannot matter.
pub fn scan_coherence(cfg: &ExperimentConfig, n_atoms_list: &[f64]) -> Result<ScanResult> {
    let mut points = Vec::with_capacity(n_atoms_list.len());
    for &n_atoms in n_atoms_list {
        let mut point_cfg = cfg.clone();
        point_cfg.n_atoms = n_atoms;
        let out = run_trials(&point_cfg)?;
        points.push(ScanPoint {
            axis: n_atoms,
            f_par: out.moments.f_par,
            xi_par_sq: out.report.xi_par_sq,
            tr_gamma_cond: out.stats.gamma_cond.trace(),
            entangled: out.report.entangled,
        });
    }
    Ok(ScanResult { points })
}

/// Total conditional variance versus window length. The epoch moves with
/// the window so M1 always spans [0, t_e].
pub fn scan_window(cfg: &ExperimentConfig, window_us_list: &[f64]) -> Result<ScanResult> {
    let mut points = Vec::with_capacity(window_us_list.len());
    for &w_us in window_us_list {
        let mut point_cfg = cfg.clone();
        point_cfg.window_us = w_us;
        point_cfg.t_e_us = w_us;
        let out = run_trials(&point_cfg)?;
        points.push(ScanPoint {
            axis: w_us,
            f_par: out.moments.f_par,
            xi_par_sq: out.report.xi_par_sq,
            tr_gamma_cond: out.stats.gamma_cond.trace(),
            entangled: out.report.entangled,
        });
    }
    Ok(ScanResult { points })
}

/// Default atom numbers for the coherence scan.
pub fn default_coherence_scan() -> Vec<f64> {
    vec![1e5, 3e5, 6e5, 1e6, 1.75e6]
}

/// Default window lengths (microseconds) for the window scan.
pub fn default_window_scan() -> Vec<f64> {
    vec![30.0, 90.0, 180.0, 270.0, 390.0, 510.0, 600.0]
}
