//! Free-induction-decay model fitting, disjoint-window linear spin
//! estimates at the epoch t_e, and conditional covariance statistics
//! across repeated trials.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::probe::{Trace, TraceLabel};

/// Classical parameters of the damped-precession signal model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalParams {
    /// Faraday coupling in rad per spin (fixed by calibration).
    pub g: f64,
    /// Larmor angular frequency in rad/s.
    pub larmor_omega: f64,
    /// Coherence time in seconds.
    pub t2: f64,
    /// Baseline offset in rad.
    pub phi0: f64,
}

impl ClassicalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t2 > 0.0) {
            return Err(Error::InvalidParameter(format!("t2 = {}", self.t2)));
        }
        for (name, v) in [
            ("g", self.g),
            ("larmor_omega", self.larmor_omega),
            ("phi0", self.phi0),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// How the decay envelope treats times before the epoch (t_r < 0).
/// `Literal` follows the signal model as written (the envelope grows for
/// t_r < 0, matching the physical decay with absolute time); `Magnitude`
/// decays away from the epoch in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnvelopeMode {
    #[default]
    Literal,
    Magnitude,
}

fn envelope(t_r: f64, t2: f64, mode: EnvelopeMode) -> f64 {
    match mode {
        EnvelopeMode::Literal => (-t_r / t2).exp(),
        EnvelopeMode::Magnitude => (-t_r.abs() / t2).exp(),
    }
}

/// Design-matrix row mapping (F_y, F_z) at the epoch to the expected
/// rotation angle at time `t` (baseline excluded).
pub fn design_row(t: f64, t_e: f64, params: &ClassicalParams, mode: EnvelopeMode) -> [f64; 2] {
    let t_r = t - t_e;
    let phase = params.larmor_omega * t_r;
    let env = envelope(t_r, params.t2, mode);
    let (s, c) = phase.sin_cos();
    [-params.g * s * env, params.g * c * env]
}

/// Design matrix (one row per sample time) in the literal envelope mode.
pub fn design_matrix(times: &[f64], t_e: f64, params: &ClassicalParams) -> Vec<[f64; 2]> {
    design_matrix_with_mode(times, t_e, params, EnvelopeMode::Literal)
}

pub fn design_matrix_with_mode(
    times: &[f64],
    t_e: f64,
    params: &ClassicalParams,
    mode: EnvelopeMode,
) -> Vec<[f64; 2]> {
    times
        .iter()
        .map(|&t| design_row(t, t_e, params, mode))
        .collect()
}

/// Weighted least-squares spin estimate from one measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinEstimate {
    pub f_y: f64,
    pub f_z: f64,
    /// Least-squares parameter covariance (H^T W H)^-1 in spins^2.
    pub est_cov: Matrix2<f64>,
    pub window: (f64, f64),
    pub n_samples: usize,
}

impl SpinEstimate {
    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.f_y, self.f_z)
    }
}

/// Weighted linear least squares of (F_y, F_z) over the samples within
/// `window` (inclusive bounds), with inverse-shot-noise weights.
pub fn estimate_window(
    trace: &Trace,
    window: (f64, f64),
    t_e: f64,
    params: &ClassicalParams,
    mode: EnvelopeMode,
) -> Result<SpinEstimate> {
    params.validate()?;
    let (t_a, t_b) = window;
    let samples: Vec<_> = trace
        .samples
        .iter()
        .filter(|s| s.t >= t_a && s.t <= t_b)
        .collect();
    if samples.len() < 3 {
        return Err(Error::Identifiability(format!(
            "window [{t_a}, {t_b}] holds {} samples, need >= 3",
            samples.len()
        )));
    }
    let span = samples.last().unwrap().t - samples[0].t;
    if params.larmor_omega != 0.0 {
        let quarter_period = 0.5 * std::f64::consts::PI / params.larmor_omega.abs();
        if span < quarter_period * (1.0 - 1e-9) {
            return Err(Error::Identifiability(format!(
                "window span {span:.3e} s is below a quarter Larmor period {quarter_period:.3e} s"
            )));
        }
    }

    let mut a = Matrix2::<f64>::zeros();
    let mut b = Vector2::<f64>::zeros();
    for s in &samples {
        let w = s.n_photons;
        let row = design_row(s.t, t_e, params, mode);
        let y = s.phi - params.phi0;
        a[(0, 0)] += w * row[0] * row[0];
        a[(0, 1)] += w * row[0] * row[1];
        a[(1, 1)] += w * row[1] * row[1];
        b[0] += w * row[0] * y;
        b[1] += w * row[1] * y;
    }
    a[(1, 0)] = a[(0, 1)];

    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(0, 1)];
    if !(det > 1e-12 * a[(0, 0)] * a[(1, 1)]) || a[(0, 0)] <= 0.0 || a[(1, 1)] <= 0.0 {
        return Err(Error::Identifiability(
            "normal matrix is singular (collinear design)".into(),
        ));
    }
    let est_cov = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(0, 1)], a[(0, 0)]) / det;
    let beta = est_cov * b;
    Ok(SpinEstimate {
        f_y: beta[0],
        f_z: beta[1],
        est_cov,
        window,
        n_samples: samples.len(),
    })
}

/// Conditional covariance statistics pooled over repeated trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalStats {
    pub gamma_f1: Matrix2<f64>,
    pub gamma_f2: Matrix2<f64>,
    /// Cross block Gamma_{F2 F1}.
    pub gamma_cross: Matrix2<f64>,
    /// Schur complement Gamma_{F2 | F1}.
    pub gamma_cond: Matrix2<f64>,
    /// Readout noise measured without atoms; zero until calibrated.
    pub gamma_zero: Matrix2<f64>,
    /// Best-linear-prediction residuals, one per trial.
    pub residuals: Vec<Vector2<f64>>,
    /// Delete-one jackknife standard errors of gamma_cond entries.
    pub std_err: Matrix2<f64>,
    pub n_trials: usize,
}

fn sample_cov_blocks(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> (
    Vector2<f64>,
    Vector2<f64>,
    Matrix2<f64>,
    Matrix2<f64>,
    Matrix2<f64>,
) {
    let n = pairs.len() as f64;
    let mut m1 = Vector2::zeros();
    let mut m2 = Vector2::zeros();
    for (x1, x2) in pairs {
        m1 += x1;
        m2 += x2;
    }
    m1 /= n;
    m2 /= n;
    let mut g11 = Matrix2::zeros();
    let mut g22 = Matrix2::zeros();
    let mut g21 = Matrix2::zeros();
    for (x1, x2) in pairs {
        let d1 = x1 - m1;
        let d2 = x2 - m2;
        g11 += d1 * d1.transpose();
        g22 += d2 * d2.transpose();
        g21 += d2 * d1.transpose();
    }
    let denom = n - 1.0;
    (m1, m2, g11 / denom, g22 / denom, g21 / denom)
}

fn schur_conditional(
    g11: &Matrix2<f64>,
    g22: &Matrix2<f64>,
    g21: &Matrix2<f64>,
) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let eigs = g11.symmetric_eigenvalues();
    let (lo, hi) = (eigs.min(), eigs.max());
    if !(lo > 0.0) || hi / lo > 1e12 {
        return Err(Error::Conditioning(format!(
            "Gamma_F1 condition number {:.3e} exceeds 1e12",
            if lo > 0.0 { hi / lo } else { f64::INFINITY }
        )));
    }
    let inv = g11
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("Gamma_F1 is singular".into()))?;
    let predictor = g21 * inv;
    let cond = g22 - predictor * g21.transpose();
    Ok((symmetrize2(&cond), predictor))
}

/// Pooled covariance blocks, Schur-complement conditional covariance,
/// best-linear-prediction residuals, and jackknife standard errors.
pub fn conditional_covariance(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<ConditionalStats> {
    if pairs.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need >= 3 trial pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let (m1, m2, g11, g22, g21) = sample_cov_blocks(pairs);
    let (gamma_cond, predictor) = schur_conditional(&g11, &g22, &g21)?;

    let residuals: Vec<Vector2<f64>> = pairs
        .iter()
        .map(|(x1, x2)| (x2 - m2) - predictor * (x1 - m1))
        .collect();

    // Delete-one jackknife over trials for the gamma_cond entries.
    let mut reps: Vec<Matrix2<f64>> = Vec::with_capacity(n);
    let mut scratch: Vec<(Vector2<f64>, Vector2<f64>)> = Vec::with_capacity(n - 1);
    for skip in 0..n {
        scratch.clear();
        scratch.extend(
            pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, p)| *p),
        );
        let (_, _, h11, h22, h21) = sample_cov_blocks(&scratch);
        let (cond_i, _) = schur_conditional(&h11, &h22, &h21)?;
        reps.push(cond_i);
    }
    let mean_rep = reps.iter().sum::<Matrix2<f64>>() / n as f64;
    let mut var = Matrix2::zeros();
    for r in &reps {
        let d = r - mean_rep;
        var += d.component_mul(&d);
    }
    let std_err = (var * ((n - 1) as f64 / n as f64)).map(f64::sqrt);

    Ok(ConditionalStats {
        gamma_f1: g11,
        gamma_f2: g22,
        gamma_cross: g21,
        gamma_cond,
        gamma_zero: Matrix2::zeros(),
        residuals,
        std_err,
        n_trials: n,
    })
}

/// Readout-noise covariance: window estimates over no-atom traces.
pub fn readout_noise(
    no_atom_traces: &[Trace],
    window: (f64, f64),
    t_e: f64,
    params: &ClassicalParams,
    mode: EnvelopeMode,
) -> Result<Matrix2<f64>> {
    if no_atom_traces.len() < 2 {
        return Err(Error::InvalidParameter(
            "need >= 2 no-atom traces for readout noise".into(),
        ));
    }
    if no_atom_traces
        .iter()
        .any(|t| t.label != TraceLabel::NoAtoms)
    {
        return Err(Error::InvalidParameter(
            "readout_noise expects traces labeled no_atoms".into(),
        ));
    }
    let estimates: Vec<Vector2<f64>> = no_atom_traces
        .iter()
        .map(|t| estimate_window(t, window, t_e, params, mode).map(|e| e.vector()))
        .collect::<Result<_>>()?;
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for e in &estimates {
        let d = e - mean;
        cov += d * d.transpose();
    }
    Ok(cov / (n - 1.0))
}

/// Result of the classical-parameter fit.
#[derive(Debug, Clone)]
pub struct FidFit {
    pub params: ClassicalParams,
    pub se_omega: f64,
    pub se_t2: f64,
    pub se_phi0: f64,
    /// Per-trace amplitude estimates (F_y, F_z) at each trace's epoch.
    pub amplitudes: Vec<Vector2<f64>>,
    pub chi2: f64,
    pub iterations: usize,
}

struct VarproEval {
    chi2: f64,
    phi0: f64,
    amplitudes: Vec<Vector2<f64>>,
    /// Weighted residuals sqrt(w) * (y - model), stacked across traces.
    residuals: Vec<f64>,
}

/// Solve the linear subproblem (per-trace amplitudes + shared baseline)
/// for fixed nonlinear parameters, by block elimination of the amplitudes.
fn varpro_solve(
    traces: &[Trace],
    g: f64,
    omega: f64,
    t2: f64,
    mode: EnvelopeMode,
) -> Result<VarproEval> {
    let params = ClassicalParams {
        g,
        larmor_omega: omega,
        t2,
        phi0: 0.0,
    };
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_trace: Vec<(Matrix2<f64>, Vector2<f64>, Vector2<f64>)> =
        Vec::with_capacity(traces.len());
    for trace in traces {
        let mut a = Matrix2::<f64>::zeros();
        let mut b = Vector2::<f64>::zeros();
        let mut c = Vector2::<f64>::zeros();
        let mut s = 0.0;
        let mut d = 0.0;
        for smp in &trace.samples {
            let w = smp.n_photons;
            let row = design_row(smp.t, trace.t_e, &params, mode);
            a[(0, 0)] += w * row[0] * row[0];
            a[(0, 1)] += w * row[0] * row[1];
            a[(1, 1)] += w * row[1] * row[1];
            b[0] += w * row[0] * smp.phi;
            b[1] += w * row[1] * smp.phi;
            c[0] += w * row[0];
            c[1] += w * row[1];
            s += w;
            d += w * smp.phi;
        }
        a[(1, 0)] = a[(0, 1)];
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(0, 1)];
        if !(det > 1e-14 * (a[(0, 0)] * a[(1, 1)]).max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient(
                "amplitude normal matrix is singular".into(),
            ));
        }
        let a_inv = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(0, 1)], a[(0, 0)]) / det;
        num += d - c.dot(&(a_inv * b));
        den += s - c.dot(&(a_inv * c));
        per_trace.push((a_inv, b, c));
    }
    if !(den > 0.0) {
        return Err(Error::RankDeficient(
            "baseline is indistinguishable from the amplitudes".into(),
        ));
    }
    let phi0 = num / den;

    let mut amplitudes = Vec::with_capacity(traces.len());
    let mut residuals = Vec::new();
    let mut chi2 = 0.0;
    for (trace, (a_inv, b, c)) in traces.iter().zip(&per_trace) {
        let beta = a_inv * (b - c * phi0);
        amplitudes.push(beta);
        for smp in &trace.samples {
            let row = design_row(smp.t, trace.t_e, &params, mode);
            let model = row[0] * beta[0] + row[1] * beta[1] + phi0;
            let r = smp.n_photons.sqrt() * (smp.phi - model);
            chi2 += r * r;
            residuals.push(r);
        }
    }
    Ok(VarproEval {
        chi2,
        phi0,
        amplitudes,
        residuals,
    })
}

/// Coarse frequency guess from an oversampled weighted periodogram.
fn periodogram_peak(trace: &Trace) -> Option<f64> {
    let n = trace.samples.len();
    if n < 4 {
        return None;
    }
    let span = trace.samples.last()?.t - trace.samples[0].t;
    let dt_min = trace
        .samples
        .windows(2)
        .map(|w| w[1].t - w[0].t)
        .fold(f64::INFINITY, f64::min);
    if !(span > 0.0) || !dt_min.is_finite() {
        return None;
    }
    let wsum: f64 = trace.samples.iter().map(|s| s.n_photons).sum();
    let mean: f64 = trace.samples.iter().map(|s| s.n_photons * s.phi).sum::<f64>() / wsum;
    let omega_max = std::f64::consts::PI / dt_min;
    let omega_step = std::f64::consts::PI / (4.0 * span);
    let n_grid = (omega_max / omega_step) as usize;
    let mut best = (0.0, 0.0);
    for i in 1..=n_grid {
        let omega = i as f64 * omega_step;
        let (mut re, mut im) = (0.0, 0.0);
        for s in &trace.samples {
            let (sn, cs) = (omega * s.t).sin_cos();
            let y = s.n_photons * (s.phi - mean);
            re += y * cs;
            im += y * sn;
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (omega, p);
        }
    }
    (best.1 > 0.0).then_some(best.0)
}

fn amplitude_spread(trace: &Trace) -> f64 {
    let n = trace.samples.len() as f64;
    let mean: f64 = trace.samples.iter().map(|s| s.phi).sum::<f64>() / n;
    trace
        .samples
        .iter()
        .map(|s| (s.phi - mean).abs())
        .fold(0.0, f64::max)
        / mean.abs().max(1.0)
}

/// Joint nonlinear least squares for (omega_L, T2, phi0) over all traces,
/// with free per-trace amplitudes. Variable projection: the amplitudes and
/// the baseline are profiled out exactly; Levenberg-Marquardt iterates on
/// (omega, ln T2) with finite-difference Jacobians of the projected
/// residual.
pub fn fit_classical_params(traces: &[Trace], g: f64, mode: EnvelopeMode) -> Result<FidFit> {
    if traces.is_empty() {
        return Err(Error::InvalidParameter("no traces to fit".into()));
    }
    if traces.iter().all(|t| amplitude_spread(t) < 1e-9) {
        return Err(Error::RankDeficient(
            "all traces carry a constant signal; omega and T2 are unidentifiable".into(),
        ));
    }
    let reference = traces
        .iter()
        .max_by(|a, b| {
            amplitude_spread(a)
                .partial_cmp(&amplitude_spread(b))
                .unwrap()
        })
        .unwrap();
    let omega0 = periodogram_peak(reference).ok_or_else(|| {
        Error::RankDeficient("no oscillation found in the reference trace".into())
    })?;
    let span = reference.samples.last().unwrap().t - reference.samples[0].t;
    if span * omega0 < 2.0 * std::f64::consts::TAU * (1.0 - 1e-9) {
        return Err(Error::RankDeficient(format!(
            "trace spans {:.2} Larmor periods, need >= 2",
            span * omega0 / std::f64::consts::TAU
        )));
    }
    let t2_0 = initial_t2(reference, span);

    let mut theta = [omega0, t2_0.ln()];
    let mut eval = varpro_solve(traces, g, theta[0], theta[1].exp(), mode)?;
    let mut lambda = 1e-3f64;
    let max_iter = 200;
    let gtol = 1e-8;
    let mut converged = false;
    let mut last_grad = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        // Finite-difference Jacobian of the projected residual.
        let m = eval.residuals.len();
        let mut jac = vec![[0.0f64; 2]; m];
        for p in 0..2 {
            let scale = if p == 0 { theta[0].abs().max(1.0) } else { 1.0 };
            let h = 1e-6 * scale;
            let mut tp = theta;
            tp[p] += h;
            let plus = varpro_solve(traces, g, tp[0], tp[1].exp(), mode)?;
            let mut tm = theta;
            tm[p] -= h;
            let minus = varpro_solve(traces, g, tm[0], tm[1].exp(), mode)?;
            for k in 0..m {
                jac[k][p] = (plus.residuals[k] - minus.residuals[k]) / (2.0 * h);
            }
        }
        let mut jtj = Matrix2::<f64>::zeros();
        let mut jtr = Vector2::<f64>::zeros();
        for (k, row) in jac.iter().enumerate() {
            jtj[(0, 0)] += row[0] * row[0];
            jtj[(0, 1)] += row[0] * row[1];
            jtj[(1, 1)] += row[1] * row[1];
            jtr[0] += row[0] * eval.residuals[k];
            jtr[1] += row[1] * eval.residuals[k];
        }
        jtj[(1, 0)] = jtj[(0, 1)];

        // Scaled gradient test: d(chi2)/d(theta) against the chi2 scale.
        let grad_scale = [theta[0].abs().max(1.0), 1.0];
        let scaled_grad = (2.0 * jtr[0] * grad_scale[0])
            .abs()
            .max((2.0 * jtr[1] * grad_scale[1]).abs());
        last_grad = scaled_grad;
        if scaled_grad <= gtol * eval.chi2.max(1.0) {
            converged = true;
            break;
        }

        let mut stepped = false;
        for _ in 0..40 {
            let damped = Matrix2::new(
                jtj[(0, 0)] * (1.0 + lambda),
                jtj[(0, 1)],
                jtj[(1, 0)],
                jtj[(1, 1)] * (1.0 + lambda),
            );
            let Some(inv) = damped.try_inverse() else {
                lambda *= 5.0;
                continue;
            };
            let delta = inv * jtr;
            let cand = [theta[0] - delta[0], theta[1] - delta[1]];
            if !cand[0].is_finite() || !cand[1].is_finite() || cand[1].abs() > 700.0 {
                lambda *= 5.0;
                continue;
            }
            match varpro_solve(traces, g, cand[0], cand[1].exp(), mode) {
                Ok(trial) if trial.chi2 <= eval.chi2 => {
                    let rel_step =
                        (delta[0] / theta[0].abs().max(1.0)).abs().max(delta[1].abs());
                    theta = cand;
                    eval = trial;
                    lambda = (lambda / 3.0).max(1e-12);
                    stepped = true;
                    if rel_step < 1e-13 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 5.0,
            }
            if lambda > 1e14 {
                break;
            }
        }
        if converged {
            break;
        }
        if !stepped {
            // No downhill step available: treat as stationary.
            converged = scaled_grad <= 1e-4 * eval.chi2.max(1.0);
            break;
        }
    }

    if !converged {
        return Err(Error::FitNotConverged {
            iterations,
            gradient: last_grad,
            chi2: eval.chi2,
        });
    }

    let params = ClassicalParams {
        g,
        larmor_omega: theta[0],
        t2: theta[1].exp(),
        phi0: eval.phi0,
    };
    let (se_omega, se_t2, se_phi0) = global_standard_errors(traces, &params, &eval, mode);
    Ok(FidFit {
        params,
        se_omega,
        se_t2,
        se_phi0,
        amplitudes: eval.amplitudes,
        chi2: eval.chi2,
        iterations,
    })
}

fn initial_t2(trace: &Trace, span: f64) -> f64 {
    let n = trace.samples.len();
    let mean: f64 = trace.samples.iter().map(|s| s.phi).sum::<f64>() / n as f64;
    let rms = |part: &[crate::probe::TraceSample]| -> f64 {
        (part.iter().map(|s| (s.phi - mean).powi(2)).sum::<f64>() / part.len().max(1) as f64)
            .sqrt()
    };
    let half = n / 2;
    let (a1, a2) = (rms(&trace.samples[..half]), rms(&trace.samples[half..]));
    if a1 > a2 && a2 > 0.0 {
        let ratio = a1 / a2;
        let t2 = (span / 2.0) / ratio.ln();
        t2.clamp(span / 10.0, span * 100.0)
    } else {
        span * 10.0
    }
}

/// Standard errors of (omega, T2, phi0) from the full-model normal matrix,
/// with the per-trace amplitude blocks eliminated by a Schur complement.
fn global_standard_errors(
    traces: &[Trace],
    params: &ClassicalParams,
    eval: &VarproEval,
    mode: EnvelopeMode,
) -> (f64, f64, f64) {
    let mut g_block = Matrix3::<f64>::zeros();
    let mut schur = Matrix3::<f64>::zeros();
    for (trace, beta) in traces.iter().zip(&eval.amplitudes) {
        let mut a = Matrix2::<f64>::zeros();
        let mut u = nalgebra::Matrix3x2::zeros();
        for smp in &trace.samples {
            let w = smp.n_photons;
            let t_r = smp.t - trace.t_e;
            let row = design_row(smp.t, trace.t_e, params, mode);
            let atomic = row[0] * beta[0] + row[1] * beta[1];
            let phase = params.larmor_omega * t_r;
            let env = envelope(t_r, params.t2, mode);
            let (s, c) = phase.sin_cos();
            // d(model)/d(omega) and d(model)/d(T2), amplitudes held.
            let d_omega = params.g * t_r * env * (-beta[1] * s - beta[0] * c);
            let d_t2 = match mode {
                EnvelopeMode::Literal => atomic * t_r / (params.t2 * params.t2),
                EnvelopeMode::Magnitude => atomic * t_r.abs() / (params.t2 * params.t2),
            };
            let grow = Vector3::new(d_omega, d_t2, 1.0);
            g_block += grow * grow.transpose() * w;
            let hrow = Vector2::new(row[0], row[1]);
            u += grow * hrow.transpose() * w;
            a[(0, 0)] += w * row[0] * row[0];
            a[(0, 1)] += w * row[0] * row[1];
            a[(1, 1)] += w * row[1] * row[1];
        }
        a[(1, 0)] = a[(0, 1)];
        if let Some(a_inv) = a.try_inverse() {
            schur += u * a_inv * u.transpose();
        }
    }
    let reduced = g_block - schur;
    match reduced.try_inverse() {
        Some(cov) => (
            cov[(0, 0)].max(0.0).sqrt(),
            cov[(1, 1)].max(0.0).sqrt(),
            cov[(2, 2)].max(0.0).sqrt(),
        ),
        None => (f64::NAN, f64::NAN, f64::NAN),
    }
}

fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{TraceLabel, TraceSample};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const TAU: f64 = std::f64::consts::TAU;

    fn synth_trace(
        f_y: f64,
        f_z: f64,
        params: &ClassicalParams,
        t_e: f64,
        n: usize,
        period: f64,
        noise_sd: f64,
        n_photons: f64,
        seed: u64,
    ) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let samples = (0..n)
            .map(|k| {
                let t = (k as f64 + 0.5) * period;
                let row = design_row(t, t_e, params, EnvelopeMode::Literal);
                let phi = row[0] * f_y
                    + row[1] * f_z
                    + params.phi0
                    + noise_sd * normal.sample(&mut rng);
                TraceSample {
                    t,
                    phi,
                    n_photons,
                }
            })
            .collect();
        Trace::new(samples, t_e, TraceLabel::WithAtoms, seed).unwrap()
    }

    fn paper_params() -> ClassicalParams {
        ClassicalParams {
            g: 1.48e-7,
            larmor_omega: TAU * 33e3,
            t2: 1.2e-3,
            phi0: 1e-3,
        }
    }

    #[test]
    fn design_row_reference_points() {
        let p = ClassicalParams {
            g: 2e-7,
            larmor_omega: TAU * 10e3,
            t2: 1e-3,
            phi0: 0.0,
        };
        // At the epoch: row = [0, g].
        let r = design_row(0.5, 0.5, &p, EnvelopeMode::Literal);
        assert_relative_eq!(r[0], 0.0, epsilon = 1e-20);
        assert_relative_eq!(r[1], p.g, max_relative = 1e-12);

        // Quarter turn with no decay: row = [-g, 0].
        let p2 = ClassicalParams {
            t2: f64::INFINITY,
            ..p
        };
        let t_r = 0.25 / 10e3;
        let r2 = design_row(t_r, 0.0, &p2, EnvelopeMode::Literal);
        assert_relative_eq!(r2[0], -p.g, max_relative = 1e-12);
        assert!(r2[1].abs() < 1e-18);

        // Pure envelope after one T2 and a full turn.
        let p3 = ClassicalParams {
            larmor_omega: TAU / 1e-3,
            t2: 1e-3,
            ..p
        };
        let r3 = design_row(1e-3, 0.0, &p3, EnvelopeMode::Literal);
        assert!(r3[0].abs() < 1e-18 * 10.0 + 1e-16);
        assert_relative_eq!(r3[1], p.g * (-1.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn estimate_window_recovers_noiseless_amplitudes() {
        let p = paper_params();
        let trace = synth_trace(3.1e5, -2.2e5, &p, 270e-6, 180, 3e-6, 0.0, 2.74e6, 1);
        let est = estimate_window(&trace, (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal).unwrap();
        assert_relative_eq!(est.f_y, 3.1e5, max_relative = 1e-9);
        assert_relative_eq!(est.f_z, -2.2e5, max_relative = 1e-9);
        assert_eq!(est.n_samples, 90);
    }

    #[test]
    fn estimate_window_readout_scale_matches_paper_order() {
        // White-noise-only traces at paper parameters: est_cov ~ 1e5 spins^2.
        let p = paper_params();
        let trace = synth_trace(0.0, 0.0, &p, 270e-6, 180, 3e-6, 6.04e-4, 2.74e6, 3);
        let est = estimate_window(&trace, (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal).unwrap();
        assert!(
            est.est_cov[(0, 0)] > 1e4 && est.est_cov[(0, 0)] < 1e6,
            "unexpected scale {}",
            est.est_cov[(0, 0)]
        );
        assert!(est.est_cov[(1, 1)] > 1e4 && est.est_cov[(1, 1)] < 1e6);
    }

    #[test]
    fn estimate_window_rejects_degenerate_inputs() {
        let p = paper_params();
        let trace = synth_trace(1e5, 1e5, &p, 270e-6, 180, 3e-6, 0.0, 2.74e6, 1);
        // Too few samples.
        assert!(matches!(
            estimate_window(&trace, (0.0, 4e-6), 270e-6, &p, EnvelopeMode::Literal),
            Err(Error::Identifiability(_))
        ));
        // Span below a quarter Larmor period.
        assert!(matches!(
            estimate_window(&trace, (0.0, 7e-6), 270e-6, &p, EnvelopeMode::Literal),
            Err(Error::Identifiability(_))
        ));
        // Collinear design: zero Larmor frequency makes every row [0, g*env].
        let p0 = ClassicalParams {
            larmor_omega: 0.0,
            ..p
        };
        let flat = synth_trace(0.0, 1e5, &p0, 270e-6, 180, 3e-6, 0.0, 2.74e6, 1);
        assert!(matches!(
            estimate_window(&flat, (0.0, 270e-6), 270e-6, &p0, EnvelopeMode::Literal),
            Err(Error::Identifiability(_))
        ));
    }

    #[test]
    fn estimate_window_baseline_shift_is_predictable() {
        let p = paper_params();
        let trace = synth_trace(2e5, 1e5, &p, 270e-6, 180, 3e-6, 0.0, 2.74e6, 1);
        let base = estimate_window(&trace, (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal).unwrap();

        let delta = 5e-4;
        let shifted_samples: Vec<TraceSample> = trace
            .samples
            .iter()
            .map(|s| TraceSample {
                phi: s.phi + delta,
                ..*s
            })
            .collect();
        let shifted = Trace::new(shifted_samples, trace.t_e, trace.label, 0).unwrap();
        let est = estimate_window(&shifted, (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal).unwrap();

        // Holding phi0 fixed, the estimate moves by est_cov * H^T W 1 * delta.
        let mut hw1 = Vector2::<f64>::zeros();
        for s in &trace.samples {
            if s.t <= 270e-6 {
                let row = design_row(s.t, 270e-6, &p, EnvelopeMode::Literal);
                hw1 += Vector2::new(row[0], row[1]) * s.n_photons;
            }
        }
        let predicted = base.vector() + base.est_cov * hw1 * delta;
        assert_relative_eq!(est.f_y, predicted[0], max_relative = 1e-9);
        assert_relative_eq!(est.f_z, predicted[1], max_relative = 1e-9);
    }

    #[test]
    fn fit_recovers_noiseless_parameters() {
        let truth = ClassicalParams {
            g: 1.48e-7,
            larmor_omega: TAU * 33e3,
            t2: 1.2e-3,
            phi0: 1e-3,
        };
        let traces: Vec<Trace> = (0..3)
            .map(|i| {
                synth_trace(
                    2.0e5 + i as f64 * 1e4,
                    -1.5e5,
                    &truth,
                    270e-6,
                    180,
                    3e-6,
                    0.0,
                    2.74e6,
                    i,
                )
            })
            .collect();
        let fit = fit_classical_params(&traces, truth.g, EnvelopeMode::Literal).unwrap();
        assert_relative_eq!(fit.params.larmor_omega, truth.larmor_omega, max_relative = 1e-6);
        assert_relative_eq!(fit.params.t2, truth.t2, max_relative = 1e-6);
        assert_relative_eq!(fit.params.phi0, truth.phi0, max_relative = 1e-6);
        assert_relative_eq!(fit.amplitudes[0][0], 2.0e5, max_relative = 1e-6);
    }

    #[test]
    fn fit_rejects_constant_signal() {
        let p = paper_params();
        let trace = synth_trace(0.0, 0.0, &p, 270e-6, 180, 3e-6, 0.0, 2.74e6, 1);
        assert!(matches!(
            fit_classical_params(&[trace], p.g, EnvelopeMode::Literal),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn fit_coverage_under_shot_noise() {
        // Monte Carlo coverage oracle: the recovered omega should sit within
        // 3 standard errors for essentially every seed.
        let truth = paper_params();
        let noise_sd = (1.0f64 / 2.74e6).sqrt();
        let mut outliers = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let trace = synth_trace(
                3.0e5, 1.0e5, &truth, 270e-6, 180, 3e-6, noise_sd, 2.74e6, seed,
            );
            let fit = fit_classical_params(&[trace], truth.g, EnvelopeMode::Literal).unwrap();
            let z = (fit.params.larmor_omega - truth.larmor_omega).abs() / fit.se_omega;
            worst = worst.max(z);
            if z > 3.0 {
                outliers += 1;
            }
        }
        assert!(outliers <= 1, "{outliers} seeds beyond 3 sigma, worst z = {worst:.2}");
    }

    #[test]
    fn conditional_covariance_independent_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..100_000)
            .map(|_| {
                (
                    Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)),
                    Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)),
                )
            })
            .collect();
        let stats = conditional_covariance(&pairs).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let diff = (stats.gamma_cond[(i, j)] - stats.gamma_f2[(i, j)]).abs();
                assert!(diff < 0.03, "gamma_cond deviates by {diff}");
            }
        }
    }

    #[test]
    fn conditional_covariance_perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..500)
            .map(|_| {
                let x = Vector2::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                (x, x)
            })
            .collect();
        let stats = conditional_covariance(&pairs).unwrap();
        let scale = stats.gamma_f2.trace();
        assert!(stats.gamma_cond.abs().max() <= 1e-8 * scale);
    }

    #[test]
    fn conditional_covariance_matches_schur_oracle() {
        // Bivariate construction with Gamma11 = Gamma22 = I, cross = 0.8 I:
        // the Schur complement is (1 - 0.64) I = 0.36 I.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rho: f64 = 0.8;
        let resid = (1.0 - rho * rho).sqrt();
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..10_000)
            .map(|_| {
                let x = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                let e = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                (x, x * rho + e * resid)
            })
            .collect();
        let stats = conditional_covariance(&pairs).unwrap();
        for i in 0..2 {
            assert_relative_eq!(stats.gamma_cond[(i, i)], 0.36, max_relative = 0.05);
        }
        assert!(stats.gamma_cond[(0, 1)].abs() < 0.03);
        // Jackknife errors should be near the large-sample scale ~ sqrt(2/n).
        assert!(stats.std_err[(0, 0)] > 0.0 && stats.std_err[(0, 0)] < 0.02);
    }

    #[test]
    fn residual_covariance_equals_gamma_cond() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..400)
            .map(|_| {
                let x = Vector2::new(normal.sample(&mut rng), 2.0 * normal.sample(&mut rng));
                let e = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                (x, x * 0.5 + e * 0.7)
            })
            .collect();
        let stats = conditional_covariance(&pairs).unwrap();
        let n = stats.residuals.len() as f64;
        let mut cov = Matrix2::zeros();
        for r in &stats.residuals {
            cov += r * r.transpose();
        }
        cov /= n - 1.0;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    cov[(i, j)],
                    stats.gamma_cond[(i, j)],
                    max_relative = 1e-6,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn conditional_covariance_rejects_singular_gamma_f1() {
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..50)
            .map(|i| {
                let v = i as f64;
                // F1 components perfectly collinear.
                (Vector2::new(v, 2.0 * v), Vector2::new(v, -v))
            })
            .collect();
        assert!(matches!(
            conditional_covariance(&pairs),
            Err(Error::Conditioning(_))
        ));
        assert!(conditional_covariance(&pairs[..2]).is_err());
    }

    #[test]
    fn readout_noise_zero_for_noiseless_traces() {
        let p = paper_params();
        let traces: Vec<Trace> = (0..4)
            .map(|i| {
                let t = synth_trace(0.0, 0.0, &p, 270e-6, 180, 3e-6, 0.0, 2.74e6, i);
                Trace::new(t.samples, t.t_e, TraceLabel::NoAtoms, i).unwrap()
            })
            .collect();
        let g0 = readout_noise(&traces, (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal).unwrap();
        assert!(g0.abs().max() < 1e-10);
    }

    #[test]
    fn readout_noise_rejects_mislabeled_traces() {
        let p = paper_params();
        let t = synth_trace(0.0, 0.0, &p, 270e-6, 180, 3e-6, 1e-4, 2.74e6, 1);
        assert!(readout_noise(&[t.clone(), t], (0.0, 270e-6), 270e-6, &p, EnvelopeMode::Literal)
            .is_err());
    }

    #[test]
    fn readout_noise_halves_when_photons_double() {
        // Common random numbers: the same standard-normal draws scaled by
        // each noise level, so the ratio is exact up to LS floating error.
        let p = paper_params();
        let make = |n_photons: f64| -> Vec<Trace> {
            (0..60)
                .map(|seed| {
                    let sd = (1.0 / n_photons).sqrt();
                    let t = synth_trace(0.0, 0.0, &p, 270e-6, 180, 3e-6, sd, n_photons, seed);
                    Trace::new(t.samples, t.t_e, TraceLabel::NoAtoms, seed).unwrap()
                })
                .collect()
        };
        let base = readout_noise(
            &make(2.74e6),
            (0.0, 270e-6),
            270e-6,
            &p,
            EnvelopeMode::Literal,
        )
        .unwrap();
        let doubled = readout_noise(
            &make(5.48e6),
            (0.0, 270e-6),
            270e-6,
            &p,
            EnvelopeMode::Literal,
        )
        .unwrap();
        for i in 0..2 {
            let ratio = doubled[(i, i)] / base[(i, i)];
            assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
        }
    }
}
