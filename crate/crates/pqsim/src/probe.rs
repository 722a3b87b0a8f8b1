//! Stroboscopic QND probe: per-pulse Faraday rotation with photon shot
//! noise, Gaussian measurement conditioning, and full trace generation.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::spin::{
    apply_scattering, backaction_inject, backaction_kick, rotate_about_x, symmetrize,
    DecoherenceParams, GaussianSpinState,
};

/// Timing, photon budget and coupling of the probe pulse train.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTrainConfig {
    /// Faraday coupling in rad per spin.
    pub g: f64,
    /// Mean photons per V-polarized probe pulse.
    pub n_photons_v: f64,
    /// Mean photons per H-polarized compensation pulse (scattering load only).
    pub n_photons_h: f64,
    /// Pulse repetition period in seconds.
    pub pulse_period: f64,
    /// Pulse duration in seconds (must be < pulse_period).
    pub pulse_duration: f64,
    /// Larmor angular frequency in rad/s.
    pub larmor_omega: f64,
    /// Coherence time hint in seconds (used as a fit seed, not imposed).
    pub t2: f64,
    /// Constant polarimeter baseline offset in rad.
    pub phi0: f64,
    pub deco: DecoherenceParams,
    pub noise: NoiseFlags,
}

/// Which stochastic terms the trace simulation draws. All on by default;
/// tests switch individual terms off to expose exact signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseFlags {
    pub shot_noise: bool,
    pub backaction: bool,
    pub depolarization: bool,
    /// Resample the per-pulse photon number from a Poisson law.
    pub poisson_photons: bool,
}

impl Default for NoiseFlags {
    fn default() -> Self {
        Self {
            shot_noise: true,
            backaction: true,
            depolarization: true,
            poisson_photons: false,
        }
    }
}

impl PulseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("g", self.g),
            ("n_photons_v", self.n_photons_v),
            ("n_photons_h", self.n_photons_h),
            ("pulse_period", self.pulse_period),
            ("pulse_duration", self.pulse_duration),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        if self.pulse_duration >= self.pulse_period {
            return Err(Error::InvalidParameter(format!(
                "pulse_duration {} must be < pulse_period {}",
                self.pulse_duration, self.pulse_period
            )));
        }
        if !(self.t2 > 0.0) {
            return Err(Error::InvalidParameter(format!("t2 = {}", self.t2)));
        }
        if !self.larmor_omega.is_finite() || !self.phi0.is_finite() {
            return Err(Error::InvalidParameter(
                "larmor_omega and phi0 must be finite".into(),
            ));
        }
        DecoherenceParams::new(
            self.deco.eta_per_photon,
            self.deco.p_return,
            self.deco.eta_dec,
        )?;
        Ok(())
    }
}

/// Whether a trace was recorded with atoms in the trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLabel {
    WithAtoms,
    NoAtoms,
}

impl TraceLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceLabel::WithAtoms => "with_atoms",
            TraceLabel::NoAtoms => "no_atoms",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "with_atoms" => Some(TraceLabel::WithAtoms),
            "no_atoms" => Some(TraceLabel::NoAtoms),
            _ => None,
        }
    }
}

/// One recorded probe pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    /// Pulse time in seconds.
    pub t: f64,
    /// Measured rotation angle in rad.
    pub phi: f64,
    /// Photons in this pulse (sets the shot-noise weight).
    pub n_photons: f64,
}

/// Time-ordered record of per-pulse rotation measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<TraceSample>,
    /// Estimation epoch in seconds.
    pub t_e: f64,
    pub label: TraceLabel,
    pub trial_seed: u64,
}

impl Trace {
    pub fn new(
        samples: Vec<TraceSample>,
        t_e: f64,
        label: TraceLabel,
        trial_seed: u64,
    ) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidParameter(format!(
                    "trace times not strictly increasing: {} then {}",
                    w[0].t, w[1].t
                )));
            }
        }
        if samples.iter().any(|s| !s.phi.is_finite()) {
            return Err(Error::InvalidParameter("non-finite phi in trace".into()));
        }
        Ok(Self {
            samples,
            t_e,
            label,
            trial_seed,
        })
    }
}

/// Deterministic Faraday rotation angle g * <F_z>.
pub fn faraday_signal(state: &GaussianSpinState, g: f64) -> f64 {
    g * state.mean.z
}

/// Faraday rotation of one stochastic realization: g * F_z with F_z drawn
/// from the state's z marginal.
pub fn faraday_signal_sampled<R: Rng>(state: &GaussianSpinState, g: f64, rng: &mut R) -> f64 {
    let sd = state.cov[(2, 2)].max(0.0).sqrt();
    let z = Normal::new(state.mean.z, sd).expect("finite marginal").sample(rng);
    g * z
}

/// Polarimeter estimator arcsin(S_y' / S_x).
pub fn polarimeter_estimate(sx: f64, sy_prime: f64) -> Result<f64> {
    if !(sx > 0.0) {
        return Err(Error::InvalidReference(sx));
    }
    if sy_prime.abs() > sx {
        return Err(Error::Saturation { sx, sy_prime });
    }
    Ok((sy_prime / sx).asin())
}

/// Shot-noise variance of the per-pulse rotation estimate: 1/n for a
/// coherent pulse of n photons (Delta^2 S_y = n/4 against <S_x> = n/2).
pub fn shot_noise_variance(n_photons: f64) -> Result<f64> {
    if !(n_photons > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "photon number must be > 0, got {n_photons}"
        )));
    }
    Ok(1.0 / n_photons)
}

/// Gaussian conditioning on the linear observation phi = g * F_z + noise.
/// Joseph-form update keeps the covariance symmetric PSD.
pub fn kalman_update(
    state: &GaussianSpinState,
    measured_phi: f64,
    g: f64,
    readout_var: f64,
) -> GaussianSpinState {
    assert!(readout_var > 0.0, "readout_var must be > 0");
    let h = Vector3::new(0.0, 0.0, g);
    let ph = state.cov * h;
    let s = h.dot(&ph) + readout_var;
    let gain = ph / s;
    let innovation = measured_phi - g * state.mean.z;
    let mean = state.mean + gain * innovation;
    let ikh = nalgebra::Matrix3::identity() - gain * h.transpose();
    let cov = ikh * state.cov * ikh.transpose() + gain * gain.transpose() * readout_var;
    GaussianSpinState {
        mean,
        cov: symmetrize(&cov),
        ..*state
    }
}

/// Simulate one stroboscopic probe run.
///
/// Pulses sit at slot midpoints t_k = (k + 1/2) * period. Per pulse the
/// latent spin and the conditional state are rotated to the pulse time, a
/// rotation angle is read out against shot noise, the state is conditioned
/// on it, and back-action plus scattering are applied to both. Returns the
/// measured trace and the conditional state after every pulse.
pub fn simulate_trace(
    state0: &GaussianSpinState,
    cfg: &PulseTrainConfig,
    duration: f64,
    t_e: f64,
    rng_seed: u64,
) -> Result<(Trace, Vec<GaussianSpinState>)> {
    cfg.validate()?;
    if !(duration >= t_e) || !(t_e >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration {duration} must cover t_e {t_e}"
        )));
    }
    if cfg.n_photons_v <= 0.0 {
        return Err(Error::InvalidParameter(
            "n_photons_v must be > 0 to measure".into(),
        ));
    }
    let n_pulses = (duration / cfg.pulse_period + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let unit = Normal::new(0.0, 1.0).unwrap();

    // Latent spin realization for this trial.
    let mut truth = Vector3::new(
        state0.mean.x + state0.cov[(0, 0)].max(0.0).sqrt() * unit.sample(&mut rng),
        state0.mean.y + state0.cov[(1, 1)].max(0.0).sqrt() * unit.sample(&mut rng),
        state0.mean.z + state0.cov[(2, 2)].max(0.0).sqrt() * unit.sample(&mut rng),
    );
    let mut state = state0.clone();
    let mut samples = Vec::with_capacity(n_pulses);
    let mut states = Vec::with_capacity(n_pulses);
    let mut t_prev = 0.0;

    let label = if state0.n_atoms > 0.0 {
        TraceLabel::WithAtoms
    } else {
        TraceLabel::NoAtoms
    };

    for k in 0..n_pulses {
        let t_k = (k as f64 + 0.5) * cfg.pulse_period;
        let theta = cfg.larmor_omega * (t_k - t_prev);
        t_prev = t_k;
        state = rotate_about_x(&state, theta);
        truth = crate::spin::rotation_about_x(theta) * truth;

        let n_photons = if cfg.noise.poisson_photons {
            Poisson::new(cfg.n_photons_v)
                .expect("positive mean photon number")
                .sample(&mut rng)
        } else {
            cfg.n_photons_v
        };
        let readout_var = shot_noise_variance(n_photons)?;
        let shot = if cfg.noise.shot_noise {
            readout_var.sqrt() * unit.sample(&mut rng)
        } else {
            0.0
        };
        let phi_k = cfg.g * truth.z + shot + cfg.phi0;
        samples.push(TraceSample {
            t: t_k,
            phi: phi_k,
            n_photons,
        });

        state = kalman_update(&state, phi_k - cfg.phi0, cfg.g, readout_var);

        if cfg.noise.backaction {
            let alpha = cfg.g * (n_photons / 4.0).sqrt() * unit.sample(&mut rng);
            truth = backaction_kick(&truth, alpha);
            state = backaction_inject(&state, cfg.g, n_photons);
        }

        let load = n_photons + cfg.n_photons_h;
        let d = (-cfg.deco.eta_per_photon * load).exp();
        if cfg.noise.depolarization {
            let floor_sd = ((1.0 - d * d) * state.n_atoms / 2.0).max(0.0).sqrt();
            truth = truth * d
                + Vector3::new(
                    floor_sd * unit.sample(&mut rng),
                    floor_sd * unit.sample(&mut rng),
                    floor_sd * unit.sample(&mut rng),
                );
        } else {
            truth *= d;
        }
        state = apply_scattering(&state, load, &cfg.deco);

        states.push(state.clone());
    }

    let trace = Trace::new(samples, t_e, label, rng_seed)?;
    Ok((trace, states))
}

/// Conditional state advanced to exactly `t_e`: the state after the last
/// pulse at t <= t_e, freely precessed over the remaining gap.
pub fn state_at_epoch(
    states: &[GaussianSpinState],
    cfg: &PulseTrainConfig,
    t_e: f64,
) -> Option<GaussianSpinState> {
    let mut last = None;
    for (k, s) in states.iter().enumerate() {
        let t_k = (k as f64 + 0.5) * cfg.pulse_period;
        if t_k <= t_e {
            last = Some((t_k, s));
        } else {
            break;
        }
    }
    last.map(|(t_k, s)| rotate_about_x(s, cfg.larmor_omega * (t_e - t_k)))
}
