//! Gaussian model of the collective spin: state construction, precession,
//! decoherence channels, and measurement back-action bookkeeping.
//!
//! All operations have value semantics; each returns a fresh state.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Relative tolerance for the Robertson uncertainty check.
pub const ROBERTSON_REL_TOL: f64 = 1e-9;

/// Collective-spin Gaussian state: mean vector (spins), covariance (spins^2),
/// expected atom number and the cumulative coherence decay factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpinState {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub n_atoms: f64,
    pub coherence_factor: f64,
}

/// Scattering and dephasing parameters of the probe channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoherenceParams {
    /// Scattering probability per probe photon (paper eta).
    pub eta_per_photon: f64,
    /// Fraction of scattered atoms returning to f = 1 (paper p).
    pub p_return: f64,
    /// Dephasing survival factor accumulated over one experiment (paper eta_dec).
    pub eta_dec: f64,
}

impl DecoherenceParams {
    pub fn new(eta_per_photon: f64, p_return: f64, eta_dec: f64) -> Result<Self> {
        if !(eta_per_photon >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eta_per_photon must be >= 0, got {eta_per_photon}"
            )));
        }
        if !(0.0..=1.0).contains(&p_return) {
            return Err(Error::InvalidParameter(format!(
                "p_return must be in [0, 1], got {p_return}"
            )));
        }
        if !(eta_dec > 0.0 && eta_dec <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta_dec must be in (0, 1], got {eta_dec}"
            )));
        }
        Ok(Self {
            eta_per_photon,
            p_return,
            eta_dec,
        })
    }

    /// Lossless channel; useful as a test fixture.
    pub fn none() -> Self {
        Self {
            eta_per_photon: 0.0,
            p_return: 1.0,
            eta_dec: 1.0,
        }
    }
}

/// Poissonian coherent spin state: polarized along +y with Poisson
/// atom-number fluctuations, Delta^2 F_y = <N_A> and Delta^2 F_{x,z} = <N_A>/2.
pub fn pcss_new(n_atoms: f64) -> Result<GaussianSpinState> {
    if !(n_atoms >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "atom number must be >= 0, got {n_atoms}"
        )));
    }
    Ok(GaussianSpinState {
        mean: Vector3::new(0.0, n_atoms, 0.0),
        cov: Matrix3::from_diagonal(&Vector3::new(n_atoms / 2.0, n_atoms, n_atoms / 2.0)),
        n_atoms,
        coherence_factor: 1.0,
    })
}

/// Ideal coherent spin state with deterministic atom number: zero variance
/// along the mean, N/2 transverse.
pub fn css_new(n_atoms: f64) -> Result<GaussianSpinState> {
    if !(n_atoms >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "atom number must be >= 0, got {n_atoms}"
        )));
    }
    Ok(GaussianSpinState {
        mean: Vector3::new(0.0, n_atoms, 0.0),
        cov: Matrix3::from_diagonal(&Vector3::new(n_atoms / 2.0, 0.0, n_atoms / 2.0)),
        n_atoms,
        coherence_factor: 1.0,
    })
}

/// Rotation about x by `phi`: F_y' = F_y cos(phi) + F_z sin(phi),
/// F_z' = -F_y sin(phi) + F_z cos(phi).
pub fn rotation_about_x(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, c, s, //
        0.0, -s, c,
    )
}

/// Larmor precession about the x-axis by angle `phi` (radians).
pub fn rotate_about_x(state: &GaussianSpinState, phi: f64) -> GaussianSpinState {
    assert!(phi.is_finite(), "rotation angle must be finite");
    let r = rotation_about_x(phi);
    let cov = symmetrize(&(r * state.cov * r.transpose()));
    GaussianSpinState {
        mean: r * state.mean,
        cov,
        ..*state
    }
}

/// Covariance rule shared by scattering and dephasing: contract toward the
/// fully depolarized floor diag(N/2, N/2, N/2) with weight (1 - d^2).
fn decay_channel(state: &GaussianSpinState, d: f64) -> GaussianSpinState {
    let floor = state.n_atoms / 2.0;
    let d2 = d * d;
    let cov = state.cov * d2 + Matrix3::from_diagonal_element((1.0 - d2) * floor);
    GaussianSpinState {
        mean: state.mean * d,
        cov: symmetrize(&cov),
        n_atoms: state.n_atoms,
        coherence_factor: state.coherence_factor * d,
    }
}

/// Off-resonant scattering of `n_photons` probe photons: mean decays by
/// exp(-eta * n_photons), covariance relaxes toward the unpolarized floor.
pub fn apply_scattering(
    state: &GaussianSpinState,
    n_photons: f64,
    params: &DecoherenceParams,
) -> GaussianSpinState {
    assert!(n_photons >= 0.0, "photon number must be >= 0");
    let d = (-params.eta_per_photon * n_photons).exp();
    decay_channel(state, d)
}

/// Magnetic-gradient dephasing by survival factor `eta_dec` in (0, 1].
pub fn apply_dephasing(state: &GaussianSpinState, eta_dec: f64) -> Result<GaussianSpinState> {
    if !(eta_dec > 0.0 && eta_dec <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eta_dec must be in (0, 1], got {eta_dec}"
        )));
    }
    Ok(decay_channel(state, eta_dec))
}

/// Measurement back-action of a probe pulse: the light's S_z shot noise
/// (variance n/4) rotates the spin about z by g*S_z, injecting first-order
/// rotation noise into the plane transverse to z.
pub fn backaction_inject(state: &GaussianSpinState, g: f64, n_photons: f64) -> GaussianSpinState {
    assert!(g >= 0.0 && n_photons >= 0.0, "g and n_photons must be >= 0");
    let var_alpha = g * g * n_photons / 4.0;
    // delta F = alpha * (-F_y, F_x, 0); rank-one covariance injection.
    let v = Vector3::new(-state.mean.y, state.mean.x, 0.0);
    let cov = state.cov + v * v.transpose() * var_alpha;
    GaussianSpinState {
        cov: symmetrize(&cov),
        ..*state
    }
}

/// First-order back-action kick applied to a sampled spin realization.
pub(crate) fn backaction_kick(truth: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    Vector3::new(
        truth.x - alpha * truth.y,
        truth.y + alpha * truth.x,
        truth.z,
    )
}

impl GaussianSpinState {
    /// Checks symmetry, PSD (smallest eigenvalue >= -1e-9 * trace) and the
    /// Robertson products for all cyclic axis pairs.
    pub fn check_invariants(&self) -> Result<()> {
        if !(self.n_atoms >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "n_atoms = {}",
                self.n_atoms
            )));
        }
        if !(self.coherence_factor > 0.0 && self.coherence_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "coherence_factor = {}",
                self.coherence_factor
            )));
        }
        let asym = (self.cov - self.cov.transpose()).abs().max();
        let scale = self.cov.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "covariance asymmetry {asym:.3e}"
            )));
        }
        let eigs = self.cov.symmetric_eigenvalues();
        let tr = self.cov.trace();
        if eigs.min() < -1e-9 * tr.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "covariance not PSD: min eigenvalue {:.3e}",
                eigs.min()
            )));
        }
        for (i, j, k) in [(0usize, 1usize, 2usize), (1, 2, 0), (2, 0, 1)] {
            let lhs = self.cov[(j, j)] * self.cov[(k, k)];
            let rhs = self.mean[i] * self.mean[i] / 4.0;
            if lhs < rhs - ROBERTSON_REL_TOL * lhs.max(rhs) {
                return Err(Error::InvalidParameter(format!(
                    "Robertson violated on axis {i}: {lhs:.6e} < {rhs:.6e}"
                )));
            }
        }
        Ok(())
    }

    /// In-plane coherence magnitude sqrt(<F_y>^2 + <F_z>^2).
    pub fn f_parallel(&self) -> f64 {
        self.mean.y.hypot(self.mean.z)
    }

    /// The (y, z) block of the covariance matrix.
    pub fn planar_cov(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::new(
            self.cov[(1, 1)],
            self.cov[(1, 2)],
            self.cov[(2, 1)],
            self.cov[(2, 2)],
        )
    }
}

pub(crate) fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn pcss_matches_poissonian_variances() {
        let s = pcss_new(1.75e6).unwrap();
        assert_eq!(s.mean, Vector3::new(0.0, 1.75e6, 0.0));
        assert_eq!(s.cov[(0, 0)], 8.75e5);
        assert_eq!(s.cov[(1, 1)], 1.75e6);
        assert_eq!(s.cov[(2, 2)], 8.75e5);
        assert_eq!(s.coherence_factor, 1.0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn pcss_empty_ensemble_is_zero() {
        let s = pcss_new(0.0).unwrap();
        assert_eq!(s.mean, Vector3::zeros());
        assert_eq!(s.cov, Matrix3::zeros());
    }

    #[test]
    fn pcss_small_count_scales_directly() {
        let s = pcss_new(2.0).unwrap();
        assert_eq!(s.mean, Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(s.cov.diagonal(), Vector3::new(1.0, 2.0, 1.0));
    }

    #[test]
    fn pcss_rejects_negative_count() {
        assert!(pcss_new(-1.0).is_err());
        assert!(css_new(-0.5).is_err());
    }

    #[test]
    fn css_has_zero_variance_along_mean() {
        let s = css_new(1e6).unwrap();
        assert_eq!(s.cov.diagonal(), Vector3::new(5e5, 0.0, 5e5));
        assert_eq!(css_new(0.0).unwrap().cov, Matrix3::zeros());
        s.check_invariants().unwrap();
    }

    #[test]
    fn rotate_identity_and_quarter_turn() {
        let s = pcss_new(1e6).unwrap();
        let same = rotate_about_x(&s, 0.0);
        assert_eq!(same.mean, s.mean);
        assert_eq!(same.cov, s.cov);

        let n = 1e6;
        let q = rotate_about_x(&s, std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(q.mean.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(q.mean.z, -n, max_relative = 1e-12);
        assert_relative_eq!(q.cov[(0, 0)], n / 2.0, max_relative = 1e-12);
        assert_relative_eq!(q.cov[(1, 1)], n / 2.0, max_relative = 1e-12);
        assert_relative_eq!(q.cov[(2, 2)], n, max_relative = 1e-12);
    }

    #[test]
    fn rotate_inverse_restores_state() {
        let mut s = pcss_new(3.3e5).unwrap();
        s = backaction_inject(&rotate_about_x(&s, 0.7), 1e-7, 1e6);
        let back = rotate_about_x(&rotate_about_x(&s, 1.234), -1.234);
        for i in 0..3 {
            assert_relative_eq!(back.mean[i], s.mean[i], max_relative = 1e-12, epsilon = 1e-9);
            for j in 0..3 {
                assert_relative_eq!(
                    back.cov[(i, j)],
                    s.cov[(i, j)],
                    max_relative = 1e-12,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn scattering_decay_matches_exponential_oracle() {
        let params = DecoherenceParams::new(3e-10, 0.55, 0.93).unwrap();
        let s = pcss_new(1.75e6).unwrap();
        let out = apply_scattering(&s, 3.81e8, &params);
        // Independent oracle: plain exponential decay of the coherence.
        let d = f64::exp(-3e-10 * 3.81e8);
        assert_relative_eq!(out.coherence_factor, d, max_relative = 1e-12);
        assert_abs_diff_eq!(d, 0.8920, epsilon = 1e-4);
        assert_relative_eq!(out.mean.y, 1.75e6 * d, max_relative = 1e-12);
        out.check_invariants().unwrap();
    }

    #[test]
    fn scattering_noop_cases() {
        let s = pcss_new(1e5).unwrap();
        let params = DecoherenceParams::new(3e-10, 0.5, 1.0).unwrap();
        let unchanged = apply_scattering(&s, 0.0, &params);
        assert_eq!(unchanged.mean, s.mean);
        assert_eq!(unchanged.cov, s.cov);

        let eta0 = DecoherenceParams::new(0.0, 0.5, 1.0).unwrap();
        let still = apply_scattering(&s, 1e12, &eta0);
        assert_eq!(still.mean, s.mean);
        assert_eq!(still.cov, s.cov);
    }

    #[test]
    fn scattering_mean_decay_is_multiplicative() {
        let params = DecoherenceParams::new(2e-9, 0.5, 1.0).unwrap();
        let s = pcss_new(1e6).unwrap();
        let split = apply_scattering(&apply_scattering(&s, 3e8, &params), 2e8, &params);
        let joint = apply_scattering(&s, 5e8, &params);
        assert_relative_eq!(split.mean.y, joint.mean.y, max_relative = 1e-12);
        assert_relative_eq!(
            split.coherence_factor,
            joint.coherence_factor,
            max_relative = 1e-12
        );
    }

    #[test]
    fn dephasing_scales_coherence() {
        let mut s = pcss_new(1.75e6).unwrap();
        // Emulate the scattering survival 0.89 first, then dephase.
        s = apply_scattering(&s, 0.89f64.ln() / -3e-10, &DecoherenceParams::new(3e-10, 0.5, 0.93).unwrap());
        let out = apply_dephasing(&s, 0.93).unwrap();
        assert_relative_eq!(out.mean.y, 0.93 * 0.89 * 1.75e6, max_relative = 1e-9);
        assert_abs_diff_eq!(out.mean.y / 1.45e6, 1.0, epsilon = 5e-3);

        let id = apply_dephasing(&s, 1.0).unwrap();
        assert_eq!(id.mean, s.mean);
        assert_eq!(id.cov, s.cov);
    }

    #[test]
    fn dephasing_is_multiplicative_on_the_mean() {
        let s = pcss_new(7.7e5).unwrap();
        let twice = apply_dephasing(&apply_dephasing(&s, 0.9).unwrap(), 0.9).unwrap();
        let once = apply_dephasing(&s, 0.81).unwrap();
        assert_relative_eq!(twice.mean.y, once.mean.y, max_relative = 1e-12);
    }

    #[test]
    fn dephasing_rejects_out_of_range() {
        let s = pcss_new(1.0).unwrap();
        assert!(apply_dephasing(&s, 0.0).is_err());
        assert!(apply_dephasing(&s, 1.5).is_err());
        assert!(apply_dephasing(&s, -0.2).is_err());
    }

    #[test]
    fn backaction_noop_cases() {
        let s = pcss_new(2e5).unwrap();
        assert_eq!(backaction_inject(&s, 0.0, 1e6).cov, s.cov);
        assert_eq!(backaction_inject(&s, 1e-7, 0.0).cov, s.cov);
    }

    #[test]
    fn backaction_increment_matches_arithmetic() {
        let s = pcss_new(1.75e6).unwrap();
        let g = 1.48e-7;
        let n = 2.74e6;
        let out = backaction_inject(&s, g, n);
        let expected = g * g * (n / 4.0) * (1.75e6f64).powi(2);
        assert_relative_eq!(out.cov[(0, 0)] - s.cov[(0, 0)], expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 4.595e4, max_relative = 1e-3);
        // mean_x = 0 here, so no yy or cross increment.
        assert_eq!(out.cov[(1, 1)], s.cov[(1, 1)]);
        assert_eq!(out.cov[(0, 1)], 0.0);
        out.check_invariants().unwrap();
    }

    #[test]
    fn backaction_cross_terms_follow_first_order_rotation() {
        let mut s = pcss_new(1e6).unwrap();
        s = rotate_about_x(&s, 0.3);
        // Give the state some x coherence by rotating the frame by hand.
        s.mean = Vector3::new(3e5, 9e5, 1e5);
        let g = 2e-7;
        let n = 1e6;
        let out = backaction_inject(&s, g, n);
        let va = g * g * n / 4.0;
        assert_relative_eq!(out.cov[(0, 0)] - s.cov[(0, 0)], va * 9e5 * 9e5, max_relative = 1e-12);
        assert_relative_eq!(out.cov[(1, 1)] - s.cov[(1, 1)], va * 3e5 * 3e5, max_relative = 1e-12);
        assert_relative_eq!(
            out.cov[(0, 1)] - s.cov[(0, 1)],
            -va * 3e5 * 9e5,
            max_relative = 1e-12
        );
    }

    fn arb_state() -> impl Strategy<Value = GaussianSpinState> {
        (1e2f64..1e6, proptest::bool::ANY).prop_map(|(n, poissonian)| {
            if poissonian {
                pcss_new(n).unwrap()
            } else {
                css_new(n).unwrap()
            }
        })
    }

    #[derive(Debug, Clone)]
    enum Op {
        Rotate(f64),
        Scatter(f64),
        Dephase(f64),
        Backaction(f64, f64),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (-6.3f64..6.3).prop_map(Op::Rotate),
            (0.0f64..1e9).prop_map(Op::Scatter),
            (0.05f64..1.0).prop_map(Op::Dephase),
            ((0.0f64..1e-6), (0.0f64..1e7)).prop_map(|(g, n)| Op::Backaction(g, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// Robertson and PSD hold after any random sequence of channel ops.
        #[test]
        fn invariants_survive_random_sequences(
            state in arb_state(),
            ops in proptest::collection::vec(arb_op(), 1..12)
        ) {
            let params = DecoherenceParams::new(3e-10, 0.55, 0.93).unwrap();
            let mut s = state;
            for op in ops {
                s = match op {
                    Op::Rotate(phi) => rotate_about_x(&s, phi),
                    Op::Scatter(n) => apply_scattering(&s, n, &params),
                    Op::Dephase(d) => apply_dephasing(&s, d).unwrap(),
                    Op::Backaction(g, n) => backaction_inject(&s, g, n),
                };
            }
            prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
        }

        /// Rotation preserves trace and determinant of the covariance.
        #[test]
        fn rotation_preserves_trace_and_det(state in arb_state(), phi in -10.0f64..10.0) {
            let r = rotate_about_x(&state, phi);
            let (t0, t1) = (state.cov.trace(), r.cov.trace());
            prop_assert!((t0 - t1).abs() <= 1e-12 * t0.abs().max(1.0));
            let (d0, d1) = (state.cov.determinant(), r.cov.determinant());
            let det_scale = d0.abs().max(t0.powi(3) * 1e-3).max(1.0);
            prop_assert!((d0 - d1).abs() <= 1e-12 * det_scale);
        }
    }
}
