//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received a parameter outside its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Polarimeter ratio |S_y'/S_x| exceeded 1; arcsin undefined.
    #[error("polarimeter saturated: |{sy_prime}| > |{sx}|")]
    Saturation { sx: f64, sy_prime: f64 },

    /// Polarimeter reference power was non-positive.
    #[error("invalid polarimeter reference S_x = {0}")]
    InvalidReference(f64),

    /// A squeezing metric was requested for a state with no in-plane coherence.
    #[error("undefined coherence: F_par = {0}")]
    UndefinedCoherence(f64),

    /// Eq.-3-style phase variance diverges where the signal slope vanishes.
    #[error("divergent phase sensitivity at phi = {phi} rad")]
    DivergentSensitivity { phi: f64 },

    /// The window design matrix cannot identify both spin components.
    #[error("window not identifiable: {0}")]
    Identifiability(String),

    /// A trace carries no usable signal for the classical-parameter fit.
    #[error("rank-deficient fit input: {0}")]
    RankDeficient(String),

    /// The nonlinear fit failed to reach the gradient tolerance.
    #[error("fit did not converge after {iterations} iterations (scaled gradient {gradient:.3e}, chi2 {chi2:.6e})")]
    FitNotConverged {
        iterations: usize,
        gradient: f64,
        chi2: f64,
    },

    /// Gamma_F1 is numerically singular; conditioning would be meaningless.
    #[error("conditioning failure: {0}")]
    Conditioning(String),

    /// Readout subtraction produced a negative planar variance.
    #[error("readout noise exceeds measured variance: trace of adjusted covariance = {0:.6e}")]
    CalibrationExceedsSignal(f64),

    /// Configuration file problem (unknown key, bad value, missing file).
    #[error("config error: {0}")]
    Config(String),

    /// A Monte Carlo trial failed; aborts the run with its index.
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    /// Malformed trace CSV.
    #[error("trace format error in {file} line {line}: {message}")]
    TraceFormat {
        file: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
