//! Gaussian simulation and estimation pipeline for a stroboscopically
//! QND-probed, precessing collective atomic spin: trace simulation, free
//! induction decay fitting, two-window conditional covariance analysis,
//! and planar-squeezing / entanglement / phase-sensitivity metrics.

pub mod analytic;
pub mod config;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod probe;
pub mod spin;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use estimator::{ClassicalParams, ConditionalStats, SpinEstimate};
pub use metrics::{MetricsReport, PlanarMoments, SubtractionMode};
pub use probe::{PulseTrainConfig, Trace, TraceLabel};
pub use spin::{DecoherenceParams, GaussianSpinState};
