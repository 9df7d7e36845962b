use crate::model::Mark;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("invalid intervention: {0}")]
    Intervention(String),
    #[error("invalid path: {0}")]
    Path(String),
    #[error("hazard evaluated at non-positive time t={0}")]
    NonPositiveTime(f64),
    #[error("cumulative hazard requested on reversed interval [{s}, {t}]")]
    ReversedInterval { s: f64, t: f64 },
    #[error("jump of mark {mark} is not admissible from state (n_ell={n_ell}, n_z={n_z})")]
    InadmissibleJump { mark: Mark, n_ell: bool, n_z: bool },
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error("event-time root finding failed: {0}")]
    RootFinding(String),
    #[error("all cause-specific hazards vanish at sampled event time t={0}")]
    DegenerateHazard(f64),
    #[error("time grid too coarse: estimated step error {estimate:.3e} exceeds {tolerance:.3e}")]
    GridTooCoarse { estimate: f64, tolerance: f64 },
    #[error("maximum-likelihood fit for mark {mark} did not converge (gradient norm {grad_norm:.3e} after {iters} iterations)")]
    FitNonConvergence { mark: Mark, grad_norm: f64, iters: usize },
    #[error("propensity fit: {0}")]
    Propensity(String),
    #[error("positivity violation: estimated propensity is zero for the requested arm")]
    Positivity,
    #[error("targeting did not converge: |mean EIC| = {residual:.3e} > threshold {threshold:.3e} after {sweeps} sweeps")]
    TargetingNonConvergence { residual: f64, threshold: f64, sweeps: usize },
    #[error("calibration target infeasible: level {level:.4} outside achievable interval (0, {l_hat:.4})")]
    InfeasibleTarget { level: f64, l_hat: f64 },
    #[error("alpha search exhausted its bracket [{lo}, {hi}] after {steps} steps")]
    BracketExhausted { lo: f64, hi: f64, steps: usize },
    #[error("derivative step h={h:.3e} is below evaluator noise: |Δψ|={delta:.3e} < 2×SE={noise:.3e}")]
    NoisyDerivative { h: f64, delta: f64, noise: f64 },
    #[error("contrast requires a treatment arm but the scenario has none")]
    MissingArm,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario file: {0}")]
    Toml(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
