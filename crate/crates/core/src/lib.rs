//! Continuous-time event-history cohorts under multiplicative intensity
//! interventions: exact simulation, Monte Carlo and backward-Kolmogorov
//! evaluation of intervention-specific risks, calibration of the scaling
//! factor to risk targets, and targeted maximum likelihood estimation with
//! influence-curve-based inference.

pub mod calibrate;
pub mod error;
pub mod fit;
pub mod markov;
pub mod mc;
pub mod model;
pub mod simulate;
pub mod tmle;
pub mod weights;

pub use error::{Error, Result};
pub use model::{
    build_scenario, InterventionSpec, IntensityModel, Mark, Path, ScenarioConfig, State,
    ValidatedScenario,
};
