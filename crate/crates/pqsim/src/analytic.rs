//! Analytic fast path: exact second-moment propagation of the
//! linear-Gaussian pulse-train model, with the window estimators applied
//! as linear maps. No Monte Carlo; used to predict conditional statistics
//! and to cross-check the sampled pipeline.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{design_row, ClassicalParams, EnvelopeMode};
use crate::probe::PulseTrainConfig;
use crate::spin::{rotation_about_x, GaussianSpinState};

/// Model-implied covariances of the two-window estimates and the spin
/// state at the estimation epoch.
#[derive(Debug, Clone)]
pub struct AnalyticPrediction {
    pub gamma_f1: Matrix2<f64>,
    pub gamma_f2: Matrix2<f64>,
    pub gamma_cross: Matrix2<f64>,
    pub gamma_cond: Matrix2<f64>,
    /// Pure readout covariance (H^T W H)^-1 per window.
    pub gamma_zero_m1: Matrix2<f64>,
    pub gamma_zero_m2: Matrix2<f64>,
    /// Latent spin mean and covariance at t_e.
    pub mean_te: Vector3<f64>,
    pub cov_te: Matrix3<f64>,
    /// Cumulative scattering survival at t_e.
    pub coherence_te: f64,
    /// Planar covariance of the spin at t_e conditioned on every M1 sample;
    /// equals the sequential Kalman filter covariance at the epoch.
    pub cond_spin_on_m1: Matrix2<f64>,
    /// Covariance of the M2 estimate conditioned on every M1 sample: the
    /// filter posterior pushed through the second-window estimator.
    pub cond_f2_on_m1: Matrix2<f64>,
}

struct Propagated {
    times: Vec<f64>,
    /// Cov(y_j, y_k) including shot noise.
    sy: DMatrix<f64>,
    /// Cov(x(t_e), y_k), one column per pulse.
    sxy: Vec<Vector3<f64>>,
    mean_te: Vector3<f64>,
    cov_te: Matrix3<f64>,
    coherence_te: f64,
}

/// One forward pass of means, covariances and all cross-covariances
/// through rotation, measurement, back-action and scattering, mirroring
/// the sampled simulation step for step.
fn propagate(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
    t_e: f64,
) -> Propagated {
    let n = (duration / cfg.pulse_period + 1e-9).floor() as usize;
    let sigma2 = if cfg.noise.shot_noise {
        1.0 / cfg.n_photons_v
    } else {
        0.0
    };
    let d = (-cfg.deco.eta_per_photon * (cfg.n_photons_v + cfg.n_photons_h)).exp();
    let backaction_var = if cfg.noise.backaction {
        cfg.g * cfg.g * cfg.n_photons_v / 4.0
    } else {
        0.0
    };
    let floor = if cfg.noise.depolarization {
        (1.0 - d * d) * state0.n_atoms / 2.0
    } else {
        0.0
    };
    // Generator of an infinitesimal rotation about z.
    let j = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);

    let mut mean = state0.mean;
    let mut cov = state0.cov;
    // crosses[j] = Cov(x_now, x_j at its measurement time); the first
    // argument evolves with the chain, the second is frozen.
    let mut crosses: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut sy = DMatrix::zeros(n, n);
    let mut sxy: Vec<Vector3<f64>> = vec![Vector3::zeros(); n];
    // Epoch bookkeeping: frozen Cov(x(te), x_j) for pre-epoch pulses and a
    // running Cov(x_now, x(te)) for post-epoch pulses.
    let mut epoch: Option<(Vector3<f64>, Matrix3<f64>, f64)> = None;
    let mut te_running: Option<Matrix3<f64>> = None;
    let mut t_prev = 0.0;
    let mut coherence = 1.0;

    for k in 0..n {
        let t_k = (k as f64 + 0.5) * cfg.pulse_period;

        // Insert the epoch as a virtual node if it falls in this gap.
        if epoch.is_none() && t_e <= t_k {
            let r = rotation_about_x(cfg.larmor_omega * (t_e - t_prev));
            mean = r * mean;
            cov = r * cov * r.transpose();
            for (jdx, c) in crosses.iter_mut().enumerate() {
                *c = r * *c;
                // Freeze Cov(x(te), y_j) = g * Cov(x(te), x_j) e_z.
                sxy[jdx] = cfg.g * c.column(2).into_owned();
            }
            epoch = Some((mean, cov, coherence));
            te_running = Some(cov);
            t_prev = t_e;
        }

        let r = rotation_about_x(cfg.larmor_omega * (t_k - t_prev));
        t_prev = t_k;
        mean = r * mean;
        cov = r * cov * r.transpose();
        for c in crosses.iter_mut() {
            *c = r * *c;
        }
        if let Some(c) = te_running.as_mut() {
            *c = r * *c;
        }

        // Measurement covariance rows for this pulse.
        times.push(t_k);
        sy[(k, k)] = cfg.g * cfg.g * cov[(2, 2)] + sigma2;
        for (jdx, c) in crosses.iter().enumerate() {
            let czz = cfg.g * cfg.g * c[(2, 2)];
            sy[(k, jdx)] = czz;
            sy[(jdx, k)] = czz;
        }
        if let Some(c) = te_running.as_ref() {
            // c = Cov(x_k, x(te)); Cov(x(te), y_k) = g * (z-row of c).
            sxy[k] = cfg.g * Vector3::new(c[(2, 0)], c[(2, 1)], c[(2, 2)]);
        }
        crosses.push(cov);

        // Back-action: multiplicative rotation noise about z.
        if backaction_var > 0.0 {
            let second = cov + mean * mean.transpose();
            cov += j * second * j.transpose() * backaction_var;
        }
        // Scattering toward the depolarized floor.
        mean *= d;
        cov = cov * (d * d) + Matrix3::from_diagonal_element(floor);
        coherence *= d;
        for c in crosses.iter_mut() {
            *c *= d;
        }
        if let Some(c) = te_running.as_mut() {
            *c *= d;
        }
        cov = (cov + cov.transpose()) * 0.5;
    }

    // Epoch after the last pulse (or no pulses at all).
    if epoch.is_none() {
        let r = rotation_about_x(cfg.larmor_omega * (t_e - t_prev));
        let m_te = r * mean;
        let c_te = r * cov * r.transpose();
        for (jdx, c) in crosses.iter().enumerate() {
            sxy[jdx] = cfg.g * (r * c).column(2).into_owned();
        }
        epoch = Some((m_te, c_te, coherence));
    }
    let (mean_te, cov_te, coherence_te) = epoch.unwrap();

    Propagated {
        times,
        sy,
        sxy,
        mean_te,
        cov_te,
        coherence_te,
    }
}

fn window_indices(times: &[f64], window: (f64, f64)) -> Vec<usize> {
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.0 && t <= window.1)
        .map(|(i, _)| i)
        .collect()
}

/// Weighted LS estimator map G = (H^T W H)^-1 H^T W for one window, plus
/// its pure-readout covariance (H^T W H)^-1.
fn estimator_map(
    times: &[f64],
    idx: &[usize],
    t_e: f64,
    params: &ClassicalParams,
    weight: f64,
) -> Result<(Vec<Vector2<f64>>, Matrix2<f64>)> {
    let mut a = Matrix2::zeros();
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let row = design_row(times[i], t_e, params, EnvelopeMode::Literal);
        let v = Vector2::new(row[0], row[1]);
        a += v * v.transpose() * weight;
        rows.push(v);
    }
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    if !(det > 1e-12 * a[(0, 0)] * a[(1, 1)]) {
        return Err(Error::Identifiability(
            "analytic window design is singular".into(),
        ));
    }
    let a_inv = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det;
    let map = rows
        .iter()
        .map(|v| a_inv * v * weight)
        .collect();
    Ok((map, a_inv))
}

/// Predict the two-window conditional statistics for an experiment that
/// starts from `state0` and estimates with `params`.
pub fn predict(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
    t_e: f64,
    windows: ((f64, f64), (f64, f64)),
    params: &ClassicalParams,
) -> Result<AnalyticPrediction> {
    cfg.validate()?;
    let prop = propagate(state0, cfg, duration, t_e);
    let (w1, w2) = windows;
    let idx1 = window_indices(&prop.times, w1);
    let idx2 = window_indices(&prop.times, w2);
    if idx1.len() < 3 || idx2.len() < 3 {
        return Err(Error::Identifiability(
            "analytic windows hold too few pulses".into(),
        ));
    }
    let weight = cfg.n_photons_v;
    let sigma2 = if cfg.noise.shot_noise {
        1.0 / cfg.n_photons_v
    } else {
        0.0
    };
    // G (sigma^2 I) G^T = sigma^2 * weight * (H^T W H)^-1 for uniform weights.
    let zero_scale = sigma2 * weight;
    let (g1, zero1) = estimator_map(&prop.times, &idx1, t_e, params, weight)?;
    let (g2, zero2) = estimator_map(&prop.times, &idx2, t_e, params, weight)?;
    let (zero1, zero2) = (zero1 * zero_scale, zero2 * zero_scale);

    let block = |ga: &[Vector2<f64>], ia: &[usize], gb: &[Vector2<f64>], ib: &[usize]| {
        let mut out = Matrix2::zeros();
        for (p, &i) in ia.iter().enumerate() {
            for (q, &j) in ib.iter().enumerate() {
                out += ga[p] * gb[q].transpose() * prop.sy[(i, j)];
            }
        }
        out
    };
    let gamma_f1 = block(&g1, &idx1, &g1, &idx1);
    let gamma_f2 = block(&g2, &idx2, &g2, &idx2);
    let gamma_cross = block(&g2, &idx2, &g1, &idx1);

    let inv1 = gamma_f1
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("predicted Gamma_F1 is singular".into()))?;
    let gamma_cond = gamma_f2 - gamma_cross * inv1 * gamma_cross.transpose();

    // Condition the epoch spin and the M2 estimate on every M1 sample.
    let m = idx1.len();
    let mut sy11 = DMatrix::zeros(m, m);
    for (p, &i) in idx1.iter().enumerate() {
        for (q, &j) in idx1.iter().enumerate() {
            sy11[(p, q)] = prop.sy[(i, j)];
        }
    }
    let chol = sy11
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("M1 sample covariance is singular".into()))?;

    // Planar rows of Cov(x(te), y_M1).
    let mut sxy1 = DMatrix::zeros(2, m);
    for (p, &i) in idx1.iter().enumerate() {
        sxy1[(0, p)] = prop.sxy[i].y;
        sxy1[(1, p)] = prop.sxy[i].z;
    }
    let solved = chol.solve(&sxy1.transpose()); // m x 2
    let mut cond_spin = Matrix2::new(
        prop.cov_te[(1, 1)],
        prop.cov_te[(1, 2)],
        prop.cov_te[(2, 1)],
        prop.cov_te[(2, 2)],
    );
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for p in 0..m {
                acc += sxy1[(a, p)] * solved[(p, b)];
            }
            cond_spin[(a, b)] -= acc;
        }
    }

    // Cov(F2_hat, y_M1) = G2 Cov(y_M2, y_M1).
    let mut sf2y1 = DMatrix::zeros(2, m);
    for (p, &i) in idx1.iter().enumerate() {
        let mut col = Vector2::zeros();
        for (q, &jdx) in idx2.iter().enumerate() {
            col += g2[q] * prop.sy[(jdx, i)];
        }
        sf2y1[(0, p)] = col[0];
        sf2y1[(1, p)] = col[1];
    }
    let solved2 = chol.solve(&sf2y1.transpose());
    let mut cond_f2 = gamma_f2;
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for p in 0..m {
                acc += sf2y1[(a, p)] * solved2[(p, b)];
            }
            cond_f2[(a, b)] -= acc;
        }
    }

    Ok(AnalyticPrediction {
        gamma_f1,
        gamma_f2,
        gamma_cross,
        gamma_cond: (gamma_cond + gamma_cond.transpose()) * 0.5,
        gamma_zero_m1: zero1,
        gamma_zero_m2: zero2,
        mean_te: prop.mean_te,
        cov_te: prop.cov_te,
        coherence_te: prop.coherence_te,
        cond_spin_on_m1: (cond_spin + cond_spin.transpose()) * 0.5,
        cond_f2_on_m1: (cond_f2 + cond_f2.transpose()) * 0.5,
    })
}

/// Mean rotation-signal trajectory implied by the model (no noise), for
/// consistency tests against the damped-sinusoid form.
pub fn mean_signal(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
) -> Vec<(f64, f64)> {
    let n = (duration / cfg.pulse_period + 1e-9).floor() as usize;
    let d = (-cfg.deco.eta_per_photon * (cfg.n_photons_v + cfg.n_photons_h)).exp();
    let mut mean = state0.mean;
    let mut t_prev = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t_k = (k as f64 + 0.5) * cfg.pulse_period;
        mean = rotation_about_x(cfg.larmor_omega * (t_k - t_prev)) * mean;
        t_prev = t_k;
        out.push((t_k, cfg.g * mean.z + cfg.phi0));
        mean *= d;
    }
    out
}

/// Batch conditional covariance of a static spin given a set of rotated
/// QND measurements, in information form. Independent oracle for the
/// sequential Kalman filter.
pub fn batch_conditional_covariance(
    prior: &Matrix3<f64>,
    rotations: &[f64],
    g: f64,
    readout_var: f64,
) -> Result<Matrix3<f64>> {
    let mut info = prior
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("singular prior".into()))?;
    let mut total = Matrix3::identity();
    for &phi in rotations {
        total = rotation_about_x(phi) * total;
        // Observation row in the initial frame: g * e_z^T R_total.
        let h = total.transpose() * Vector3::new(0.0, 0.0, g);
        info += h * h.transpose() / readout_var;
    }
    info.try_inverse()
        .ok_or_else(|| Error::Conditioning("singular information matrix".into()))
}

/// Marginal covariance of the stacked measurement vector, exposed for the
/// linear-Gaussian equivalence tests.
pub fn measurement_covariance(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
    t_e: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let prop = propagate(state0, cfg, duration, t_e);
    (prop.times, prop.sy)
}

/// Batch least-squares check used by tests: conditional covariance of the
/// epoch spin given a subset of measurements, straight from the joint
/// Gaussian.
pub fn spin_given_measurements(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
    t_e: f64,
    selector: impl Fn(f64) -> bool,
) -> Result<Matrix3<f64>> {
    let prop = propagate(state0, cfg, duration, t_e);
    let idx: Vec<usize> = prop
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| selector(t))
        .map(|(i, _)| i)
        .collect();
    let m = idx.len();
    let mut syy = DMatrix::zeros(m, m);
    for (p, &i) in idx.iter().enumerate() {
        for (q, &j) in idx.iter().enumerate() {
            syy[(p, q)] = prop.sy[(i, j)];
        }
    }
    let chol = syy
        .cholesky()
        .ok_or_else(|| Error::Conditioning("measurement covariance singular".into()))?;
    let mut out = prop.cov_te;
    for a in 0..3 {
        let ca = DVector::from_fn(m, |p, _| prop.sxy[idx[p]][a]);
        let solved = chol.solve(&ca);
        for b in 0..3 {
            let cb = DVector::from_fn(m, |p, _| prop.sxy[idx[p]][b]);
            out[(a, b)] -= cb.dot(&solved);
        }
    }
    Ok((out + out.transpose()) * 0.5)
}
