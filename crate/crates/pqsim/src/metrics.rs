//! Squeezing, entanglement and phase-sensitivity figures of merit, plus
//! the coherent-state and single-variable-squeezed reference curves.

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::spin::GaussianSpinState;

/// Entanglement witness threshold for f = 1 atoms. 7/16 is a dyadic
/// rational, so the constant is exact in binary floating point.
pub const ENTANGLEMENT_THRESHOLD: f64 = 7.0 / 16.0;

/// Default coupling for the single-variable squeezed reference state,
/// chosen so the reference reproduces its nominal enhancement at phi = 0.
pub const DEFAULT_SSS_COUPLING: f64 = 1.48e-7;

/// Whether planar covariances are used as measured or with the readout
/// noise subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubtractionMode {
    #[default]
    Raw,
    ReadoutSubtracted,
}

impl SubtractionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubtractionMode::Raw => "raw",
            SubtractionMode::ReadoutSubtracted => "subtracted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(SubtractionMode::Raw),
            "subtracted" => Some(SubtractionMode::ReadoutSubtracted),
            _ => None,
        }
    }
}

/// First and second moments of the in-plane spin at the estimation epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarMoments {
    pub mean_y: f64,
    pub mean_z: f64,
    pub var_y: f64,
    pub var_z: f64,
    pub cov_yz: f64,
    /// In-plane coherence magnitude sqrt(mean_y^2 + mean_z^2).
    pub f_par: f64,
    /// Input spin coherence F = <N_A>.
    pub n_atoms_in: f64,
    /// Atoms remaining in f = 1 after probing:
    /// (eta_sc + p (1 - eta_sc)) * N_A.
    pub n_tilde: f64,
}

impl PlanarMoments {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mean_y: f64,
        mean_z: f64,
        var_y: f64,
        var_z: f64,
        cov_yz: f64,
        n_atoms_in: f64,
        eta_sc: f64,
        p_return: f64,
    ) -> Result<Self> {
        if !(var_y >= 0.0) || !(var_z >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "planar variances must be >= 0: var_y = {var_y}, var_z = {var_z}"
            )));
        }
        if var_y * var_z < cov_yz * cov_yz * (1.0 - 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "planar covariance violates Cauchy-Schwarz: cov = {cov_yz}"
            )));
        }
        if !(n_atoms_in >= 0.0) || !(0.0..=1.0).contains(&eta_sc) || !(0.0..=1.0).contains(&p_return)
        {
            return Err(Error::InvalidParameter(
                "n_atoms_in, eta_sc and p_return must be valid fractions/counts".into(),
            ));
        }
        Ok(Self {
            mean_y,
            mean_z,
            var_y,
            var_z,
            cov_yz,
            f_par: mean_y.hypot(mean_z),
            n_atoms_in,
            n_tilde: (eta_sc + p_return * (1.0 - eta_sc)) * n_atoms_in,
        })
    }

    /// Planar moments of a spin state. The state's coherence factor is
    /// taken as the scattering survival eta_sc (dephasing does not remove
    /// atoms from f = 1 and must not enter n_tilde).
    pub fn from_state(state: &GaussianSpinState, p_return: f64) -> Result<Self> {
        Self::new(
            state.mean.y,
            state.mean.z,
            state.cov[(1, 1)],
            state.cov[(2, 2)],
            state.cov[(1, 2)],
            state.n_atoms,
            state.coherence_factor,
            p_return,
        )
    }

    pub fn planar_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.var_y, self.cov_yz, self.cov_yz, self.var_z)
    }
}

fn adjusted(gamma: &Matrix2<f64>, gamma0: &Matrix2<f64>, mode: SubtractionMode) -> Matrix2<f64> {
    match mode {
        SubtractionMode::Raw => *gamma,
        SubtractionMode::ReadoutSubtracted => gamma - gamma0,
    }
}

/// Planar squeezing parameters: xi_par^2 together with the per-component
/// xi_y^2 and xi_z^2 (xi_par^2 is their average by definition).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarSqueezing {
    pub xi_par_sq: f64,
    pub xi_y_sq: f64,
    pub xi_z_sq: f64,
}

pub fn xi_parallel_sq(
    moments: &PlanarMoments,
    gamma: &Matrix2<f64>,
    gamma0: &Matrix2<f64>,
    mode: SubtractionMode,
) -> Result<PlanarSqueezing> {
    if !(moments.f_par > 0.0) {
        return Err(Error::UndefinedCoherence(moments.f_par));
    }
    let g = adjusted(gamma, gamma0, mode);
    let xi_y_sq = 2.0 * g[(0, 0)] / moments.f_par;
    let xi_z_sq = 2.0 * g[(1, 1)] / moments.f_par;
    Ok(PlanarSqueezing {
        xi_par_sq: (xi_y_sq + xi_z_sq) / 2.0,
        xi_y_sq,
        xi_z_sq,
    })
}

/// Entanglement witness Delta^2 F_par / N_tilde with its strict 7/16 test.
pub fn xi_e_sq(
    moments: &PlanarMoments,
    gamma: &Matrix2<f64>,
    gamma0: &Matrix2<f64>,
    mode: SubtractionMode,
) -> Result<(f64, bool)> {
    if !(moments.n_tilde > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "n_tilde must be > 0, got {}",
            moments.n_tilde
        )));
    }
    let value = adjusted(gamma, gamma0, mode).trace() / moments.n_tilde;
    Ok((value, value < ENTANGLEMENT_THRESHOLD))
}

/// Metrological (Wineland-like) parameter F * Delta^2 F_par / F_par^2.
pub fn xi_m_sq(
    moments: &PlanarMoments,
    gamma: &Matrix2<f64>,
    gamma0: &Matrix2<f64>,
    mode: SubtractionMode,
) -> Result<f64> {
    if !(moments.f_par > 0.0) {
        return Err(Error::UndefinedCoherence(moments.f_par));
    }
    Ok(moments.n_atoms_in * adjusted(gamma, gamma0, mode).trace() / (moments.f_par * moments.f_par))
}

/// Phase-estimation variance at precession phase `phi`:
/// Delta^2 F_z(phi) / (<F_y> cos(phi) + <F_z> sin(phi))^2 with the planar
/// noise taken from `gamma`.
pub fn phase_variance(moments: &PlanarMoments, gamma: &Matrix2<f64>, phi: f64) -> Result<f64> {
    let den_root = moments.mean_y * phi.cos() + moments.mean_z * phi.sin();
    if den_root.abs() <= 1e-12 * moments.f_par.max(f64::MIN_POSITIVE) {
        return Err(Error::DivergentSensitivity { phi });
    }
    let (s, c) = phi.sin_cos();
    let num = gamma[(0, 0)] * s * s + gamma[(1, 1)] * c * c + gamma[(0, 1)] * (2.0 * s * c);
    Ok(num / (den_root * den_root))
}

/// Rotate the planar frame so the coherence points along +y. The moments'
/// own covariance block and the supplied gamma transform identically.
pub fn align_coherence(
    moments: &PlanarMoments,
    gamma: &Matrix2<f64>,
) -> Result<(PlanarMoments, Matrix2<f64>)> {
    if !(moments.f_par > 0.0) {
        return Err(Error::UndefinedCoherence(moments.f_par));
    }
    let theta = moments.mean_z.atan2(moments.mean_y);
    let (s, c) = theta.sin_cos();
    let r = Matrix2::new(c, s, -s, c);
    let own = r * moments.planar_cov() * r.transpose();
    let g = r * gamma * r.transpose();
    let aligned = PlanarMoments {
        mean_y: moments.f_par,
        mean_z: 0.0,
        var_y: own[(0, 0)],
        var_z: own[(1, 1)],
        cov_yz: 0.5 * (own[(0, 1)] + own[(1, 0)]),
        f_par: moments.f_par,
        n_atoms_in: moments.n_atoms_in,
        n_tilde: moments.n_tilde,
    };
    Ok((aligned, (g + g.transpose()) * 0.5))
}

/// A planar Gaussian state reduced to what Eq.-3-style phase sensitivity
/// needs: in-plane means and a 2x2 noise matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSensitivity {
    pub mean_y: f64,
    pub mean_z: f64,
    pub gamma: Matrix2<f64>,
}

impl PhaseSensitivity {
    pub fn new(mean_y: f64, mean_z: f64, gamma: Matrix2<f64>) -> Self {
        Self {
            mean_y,
            mean_z,
            gamma,
        }
    }

    /// Phase variance at `phi`; errors where the signal slope vanishes.
    pub fn variance(&self, phi: f64) -> Result<f64> {
        let f_par = self.mean_y.hypot(self.mean_z);
        let den_root = self.mean_y * phi.cos() + self.mean_z * phi.sin();
        if den_root.abs() <= 1e-12 * f_par.max(f64::MIN_POSITIVE) {
            return Err(Error::DivergentSensitivity { phi });
        }
        let (s, c) = phi.sin_cos();
        let num = self.gamma[(0, 0)] * s * s
            + self.gamma[(1, 1)] * c * c
            + self.gamma[(0, 1)] * (2.0 * s * c);
        Ok(num / (den_root * den_root))
    }
}

/// Phase sensitivity of the Poissonian coherent input state with coherence
/// along +y: Delta^2 F_y = N, Delta^2 F_z = N/2.
pub fn pcss_reference(n_atoms: f64) -> PhaseSensitivity {
    PhaseSensitivity::new(
        n_atoms,
        0.0,
        Matrix2::new(n_atoms, 0.0, 0.0, n_atoms / 2.0),
    )
}

/// Phase sensitivity of an ideal single-variable spin-squeezed state made
/// by one instantaneous QND measurement of the same total photon budget:
/// Delta^2 F_y = N, Delta^2 F_z = (N/2) / (1 + g^2 N_L N / 2), coherence
/// eta_sc * N.
pub fn sss_reference(n_atoms: f64, g: f64, n_total_photons: f64, eta_sc: f64) -> PhaseSensitivity {
    let squeeze = 1.0 + g * g * n_total_photons * n_atoms / 2.0;
    PhaseSensitivity::new(
        eta_sc * n_atoms,
        0.0,
        Matrix2::new(n_atoms, 0.0, 0.0, (n_atoms / 2.0) / squeeze),
    )
}

/// Enhancement of `candidate` over `reference` in dB; positive means the
/// candidate estimates phase with less variance. Divergent grid points are
/// reported as None.
pub fn enhancement_db(
    candidate: &PhaseSensitivity,
    reference: &PhaseSensitivity,
    phi_grid: &[f64],
) -> Vec<(f64, Option<f64>)> {
    phi_grid
        .iter()
        .map(|&phi| {
            let db = match (candidate.variance(phi), reference.variance(phi)) {
                (Ok(c), Ok(r)) if c > 0.0 && r > 0.0 => Some(-10.0 * (c / r).log10()),
                _ => None,
            };
            (phi, db)
        })
        .collect()
}

/// Default number of phase grid points.
pub const DEFAULT_PHASE_GRID: usize = 721;

/// `n` phases covering (-pi/2, pi/2) with a half-step offset, so known
/// divergence points never land on the grid.
pub fn phase_grid(n: usize) -> Vec<f64> {
    let step = std::f64::consts::PI / n as f64;
    (0..n)
        .map(|j| -std::f64::consts::FRAC_PI_2 + (j as f64 + 0.5) * step)
        .collect()
}

/// A metric value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueWithError {
    pub value: f64,
    pub std_err: f64,
}

/// All figures of merit for one analyzed data set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub xi_par_sq: ValueWithError,
    pub xi_y_sq: ValueWithError,
    pub xi_z_sq: ValueWithError,
    pub xi_e_sq: ValueWithError,
    pub xi_m_sq: ValueWithError,
    pub entangled: bool,
    /// PQS phase variance over the grid, aligned coherence. None marks a
    /// divergent point.
    pub phase_curve: Vec<(f64, Option<f64>)>,
    /// Standard quantum limit 1 / (2 F_par).
    pub sql: f64,
    /// Enhancement of the PQS over the input-coherence PCSS, in dB.
    pub enhancement_db: Vec<(f64, Option<f64>)>,
    pub subtraction_mode: SubtractionMode,
}

impl MetricsReport {
    /// Assemble the report from pooled statistics. Squeezing parameters use
    /// the measurement-frame covariance (their traces are rotation
    /// invariant, the component values are frame quantities); phase curves
    /// use the coherence-aligned frame.
    pub fn compute(
        moments: &PlanarMoments,
        gamma_cond: &Matrix2<f64>,
        gamma_zero: &Matrix2<f64>,
        gamma_std_err: &Matrix2<f64>,
        mode: SubtractionMode,
        grid_points: usize,
    ) -> Result<Self> {
        let sq = xi_parallel_sq(moments, gamma_cond, gamma_zero, mode)?;
        let (xi_e, entangled) = xi_e_sq(moments, gamma_cond, gamma_zero, mode)?;
        let xi_m = xi_m_sq(moments, gamma_cond, gamma_zero, mode)?;
        for (name, v) in [
            ("xi_par_sq", sq.xi_par_sq),
            ("xi_y_sq", sq.xi_y_sq),
            ("xi_z_sq", sq.xi_z_sq),
            ("xi_e_sq", xi_e),
            ("xi_m_sq", xi_m),
        ] {
            if v < -1e-9 {
                return Err(Error::CalibrationExceedsSignal(v));
            }
            debug_assert!(v.is_finite(), "{name} is not finite");
        }

        // Error propagation from the jackknife errors of the covariance
        // entries, treating the diagonal entries as independent.
        let se_trace = gamma_std_err[(0, 0)].hypot(gamma_std_err[(1, 1)]);
        let f_par = moments.f_par;
        let report_value = |v: f64, se: f64| ValueWithError {
            value: v.max(0.0),
            std_err: se,
        };

        let (aligned_moments, aligned_gamma) = align_coherence(moments, gamma_cond)?;
        let aligned_gamma = adjusted(&aligned_gamma, &{
            let (_, g0_aligned) = align_coherence(moments, gamma_zero)?;
            g0_aligned
        }, mode);
        let pqs = PhaseSensitivity::new(aligned_moments.mean_y, aligned_moments.mean_z, aligned_gamma);
        let pcss = pcss_reference(moments.n_atoms_in);
        let grid = phase_grid(grid_points);
        let phase_curve = grid
            .iter()
            .map(|&phi| (phi, pqs.variance(phi).ok()))
            .collect();
        let enhancement = enhancement_db(&pqs, &pcss, &grid);

        Ok(MetricsReport {
            xi_par_sq: report_value(sq.xi_par_sq, se_trace / f_par),
            xi_y_sq: report_value(sq.xi_y_sq, 2.0 * gamma_std_err[(0, 0)] / f_par),
            xi_z_sq: report_value(sq.xi_z_sq, 2.0 * gamma_std_err[(1, 1)] / f_par),
            xi_e_sq: report_value(xi_e, se_trace / moments.n_tilde),
            xi_m_sq: report_value(xi_m, moments.n_atoms_in * se_trace / (f_par * f_par)),
            entangled,
            phase_curve,
            sql: 1.0 / (2.0 * f_par),
            enhancement_db: enhancement,
            subtraction_mode: mode,
        })
    }

    /// Minimum phase variance over the sampled curve with its phase.
    pub fn min_phase_variance(&self) -> Option<(f64, f64)> {
        self.phase_curve
            .iter()
            .filter_map(|(phi, v)| v.map(|v| (*phi, v)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

/// The conditional covariance reported for the strongest data set, in
/// spins^2, used as a fixed reference input by tests and examples.
pub fn reference_conditional_covariance() -> Matrix2<f64> {
    Matrix2::new(2.32e5, 0.64e5, 0.64e5, 3.00e5)
}

/// The readout-noise covariance matching `reference_conditional_covariance`.
pub fn reference_readout_noise() -> Matrix2<f64> {
    Matrix2::new(1.02e5, 0.14e5, 0.14e5, 1.03e5)
}
