//! Domain types for marked event-history paths and Weibull proportional-hazard
//! intensities, plus scenario configuration with the three built-in example
//! presets.
//!
//! A scenario describes one cause-specific intensity model per mark in the
//! mark space `{1..J, ell, z, c}`. Each intensity is
//! `λ(t) = η ν t^(ν-1) exp(β_a0·A0 + β_l0·L0 + β_z·N^z(t-) + β_ell·N^ell(t-))`,
//! so cumulative hazards over intervals with frozen state are available in
//! closed form: `η exp(βᵀx) (t^ν - s^ν)`.

use crate::error::{Error, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Jump mark: outcome causes `1..=J`, the intermediate event `z`, the
/// covariate event `ell`, or right-censoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mark {
    Outcome(u8),
    Ell,
    Z,
    Censor,
}

impl Mark {
    /// The full mark space for a scenario with `j` outcome causes.
    pub fn all(j: u8) -> Vec<Mark> {
        let mut marks: Vec<Mark> = (1..=j).map(Mark::Outcome).collect();
        marks.extend([Mark::Ell, Mark::Z, Mark::Censor]);
        marks
    }

    /// Terminal marks absorb the path (no further jumps).
    pub fn is_terminal(self) -> bool {
        matches!(self, Mark::Outcome(_) | Mark::Censor)
    }
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mark::Outcome(j) => write!(f, "{j}"),
            Mark::Ell => write!(f, "ell"),
            Mark::Z => write!(f, "z"),
            Mark::Censor => write!(f, "c"),
        }
    }
}

impl FromStr for Mark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ell" | "l" => Ok(Mark::Ell),
            "z" => Ok(Mark::Z),
            "c" | "censor" => Ok(Mark::Censor),
            other => other
                .parse::<u8>()
                .ok()
                .filter(|j| *j >= 1)
                .map(Mark::Outcome)
                .ok_or_else(|| Error::Invalid(format!("unknown mark '{other}'"))),
        }
    }
}

impl Serialize for Mark {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mark {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Pre-terminal process state: which of the one-jump processes have fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct State {
    pub n_ell: bool,
    pub n_z: bool,
}

impl State {
    pub fn new(n_ell: bool, n_z: bool) -> Self {
        Self { n_ell, n_z }
    }

    /// Index into 4-element transient-state arrays: `n_ell*2 + n_z`.
    pub fn index(self) -> usize {
        (self.n_ell as usize) * 2 + (self.n_z as usize)
    }

    pub fn with_jump(self, mark: Mark) -> Self {
        match mark {
            Mark::Ell => State { n_ell: true, ..self },
            Mark::Z => State { n_z: true, ..self },
            _ => self,
        }
    }
}

/// Whether a jump of `mark` is admissible from `state` (for a path that is
/// still under observation). The one-jump processes cannot fire twice.
pub fn admissible(mark: Mark, state: State) -> bool {
    match mark {
        Mark::Ell => !state.n_ell,
        Mark::Z => !state.n_z,
        Mark::Outcome(_) | Mark::Censor => true,
    }
}

/// Weibull proportional-hazard intensity model for one mark.
///
/// `eta = 0` encodes a structurally zero hazard (used for disabled components
/// and zero-event fits); `eta > 0, nu > 0` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub eta: f64,
    pub nu: f64,
    #[serde(default)]
    pub beta_a0: f64,
    #[serde(default)]
    pub beta_l0: f64,
    #[serde(default)]
    pub beta_z: f64,
    #[serde(default)]
    pub beta_ell: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self { eta: 0.0, nu: 1.0, beta_a0: 0.0, beta_l0: 0.0, beta_z: 0.0, beta_ell: 0.0 }
    }
}

impl IntensityModel {
    pub fn new(eta: f64, nu: f64) -> Self {
        Self { eta, nu, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Scenario(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::Scenario(format!("nu must be finite and > 0, got {}", self.nu)));
        }
        for (name, b) in [
            ("beta_a0", self.beta_a0),
            ("beta_l0", self.beta_l0),
            ("beta_z", self.beta_z),
            ("beta_ell", self.beta_ell),
        ] {
            if !b.is_finite() {
                return Err(Error::Scenario(format!("{name} must be finite, got {b}")));
            }
        }
        Ok(())
    }

    /// exp(βᵀx) for covariates (a0, l0) and current state.
    pub fn multiplier(&self, state: State, a0: f64, l0: f64) -> f64 {
        (self.beta_a0 * a0
            + self.beta_l0 * l0
            + self.beta_z * (state.n_z as u8 as f64)
            + self.beta_ell * (state.n_ell as u8 as f64))
            .exp()
    }

    /// Raw hazard η ν t^(ν-1) exp(βᵀx), without admissibility zeroing.
    pub fn raw_hazard(&self, t: f64, state: State, a0: f64, l0: f64) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        self.eta * self.nu * t.powf(self.nu - 1.0) * self.multiplier(state, a0, l0)
    }

    /// Raw cumulative hazard η exp(βᵀx) (t^ν - s^ν) over `[s, t]` with frozen
    /// state, without admissibility zeroing.
    pub fn raw_cumulative(&self, s: f64, t: f64, state: State, a0: f64, l0: f64) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        self.eta * self.multiplier(state, a0, l0) * (t.powf(self.nu) - s.powf(self.nu))
    }
}

/// Cause-specific hazard for `mark` at time `t > 0`; zero when the mark is
/// inadmissible from `state`.
pub fn hazard_at(
    model: &IntensityModel,
    mark: Mark,
    t: f64,
    state: State,
    a0: f64,
    l0: f64,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    if !admissible(mark, state) {
        return Ok(0.0);
    }
    Ok(model.raw_hazard(t, state, a0, l0))
}

/// Cumulative hazard for `mark` over `[s, t]` with state frozen; zero when the
/// mark is inadmissible from `state`.
pub fn cumulative_hazard(
    model: &IntensityModel,
    mark: Mark,
    s: f64,
    t: f64,
    state: State,
    a0: f64,
    l0: f64,
) -> Result<f64> {
    if s > t || s < 0.0 {
        return Err(Error::ReversedInterval { s, t });
    }
    if !admissible(mark, state) {
        return Ok(0.0);
    }
    Ok(model.raw_cumulative(s, t, state, a0, l0))
}

/// Baseline covariate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum L0Dist {
    Uniform01,
    Empirical { values: Vec<f64> },
}

impl Default for L0Dist {
    fn default() -> Self {
        L0Dist::Uniform01
    }
}

/// Baseline treatment assignment mechanism P(A0=1 | L0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Propensity {
    Constant { value: f64 },
    Logistic { intercept: f64, slope: f64 },
}

impl Propensity {
    pub fn prob1(&self, l0: f64) -> f64 {
        match *self {
            Propensity::Constant { value } => value,
            Propensity::Logistic { intercept, slope } => {
                let e = (intercept + slope * l0).exp();
                e / (1.0 + e)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Propensity::Constant { value } => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(Error::Scenario(format!(
                        "constant propensity must lie in (0,1), got {value}"
                    )));
                }
            }
            Propensity::Logistic { intercept, slope } => {
                if !intercept.is_finite() || !slope.is_finite() {
                    return Err(Error::Scenario("logistic propensity parameters must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Full data-generating configuration: one intensity model per mark, baseline
/// covariate law, optional treatment assignment, and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of outcome causes J >= 1.
    pub j: u8,
    pub tau: f64,
    #[serde(default)]
    pub l0: L0Dist,
    /// Absent in observational scenarios without a baseline treatment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Propensity>,
    pub models: BTreeMap<Mark, IntensityModel>,
}

impl ScenarioConfig {
    /// Built-in presets. Coefficients follow the three worked examples; the
    /// baselines they leave open default to η=0.1, ν=1 for event marks,
    /// η=0.05 for censoring, τ=3, P(A0=1)=0.5, L0 ~ Unif(0,1).
    pub fn preset(name: &str) -> Result<ScenarioConfig> {
        let mut models = BTreeMap::new();
        let base = IntensityModel::new(0.1, 1.0);
        models.insert(Mark::Outcome(1), base);
        models.insert(Mark::Ell, base);
        models.insert(Mark::Z, base);
        models.insert(Mark::Censor, IntensityModel::new(0.05, 1.0));
        let mut config = ScenarioConfig {
            j: 1,
            tau: 3.0,
            l0: L0Dist::Uniform01,
            propensity: Some(Propensity::Constant { value: 0.5 }),
            models,
        };
        {
            let m = &mut config.models;
            match name {
                "example1" => {
                    m.get_mut(&Mark::Z).unwrap().beta_ell = 3.0;
                    let o = m.get_mut(&Mark::Outcome(1)).unwrap();
                    o.beta_ell = 2.5;
                    o.beta_z = -0.5;
                    m.get_mut(&Mark::Ell).unwrap().beta_z = -2.5;
                }
                "example2" => {
                    let o = m.get_mut(&Mark::Outcome(1)).unwrap();
                    o.beta_a0 = -0.1;
                    o.beta_z = 1.5;
                    m.get_mut(&Mark::Z).unwrap().beta_a0 = -2.5;
                }
                "example3" => {
                    let e = m.get_mut(&Mark::Ell).unwrap();
                    e.beta_a0 = -2.5;
                    e.beta_z = -2.0;
                    let o = m.get_mut(&Mark::Outcome(1)).unwrap();
                    o.beta_a0 = -0.5;
                    o.beta_ell = 0.5;
                    o.beta_z = -3.0;
                    m.get_mut(&Mark::Z).unwrap().beta_ell = 3.0;
                }
                other => {
                    return Err(Error::Scenario(format!(
                        "unknown preset '{other}' (expected example1|example2|example3)"
                    )))
                }
            }
        }
        Ok(config)
    }

    /// Parse a scenario from TOML text (see docs/scenario-format.md).
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// A scenario config that passed validation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedScenario {
    config: ScenarioConfig,
}

/// Validate a scenario configuration.
pub fn build_scenario(config: ScenarioConfig) -> Result<ValidatedScenario> {
    if config.j < 1 {
        return Err(Error::Scenario("at least one outcome cause is required".into()));
    }
    if !(config.tau > 0.0) || !config.tau.is_finite() {
        return Err(Error::Scenario(format!("tau must be finite and > 0, got {}", config.tau)));
    }
    for mark in Mark::all(config.j) {
        let model = config
            .models
            .get(&mark)
            .ok_or_else(|| Error::Scenario(format!("missing intensity model for mark {mark}")))?;
        model.validate().map_err(|e| Error::Scenario(format!("mark {mark}: {e}")))?;
    }
    for mark in config.models.keys() {
        if !Mark::all(config.j).contains(mark) {
            return Err(Error::Scenario(format!("model for mark {mark} outside the mark space")));
        }
    }
    if let L0Dist::Empirical { values } = &config.l0 {
        if values.is_empty() {
            return Err(Error::Scenario("empirical L0 distribution needs at least one value".into()));
        }
    }
    if let Some(p) = &config.propensity {
        p.validate()?;
    }
    Ok(ValidatedScenario { config })
}

impl ValidatedScenario {
    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn j(&self) -> u8 {
        self.config.j
    }

    pub fn model(&self, mark: Mark) -> &IntensityModel {
        &self.config.models[&mark]
    }

    pub fn models(&self) -> &BTreeMap<Mark, IntensityModel> {
        &self.config.models
    }

    pub fn propensity(&self) -> Option<&Propensity> {
        self.config.propensity.as_ref()
    }

    pub fn l0(&self) -> &L0Dist {
        &self.config.l0
    }
}

/// Intervention: optionally force the baseline arm, always remove censoring,
/// and scale the z-intensity by `alpha >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// `None` leaves the baseline treatment as observed.
    pub arm: Option<bool>,
    pub alpha: f64,
}

impl InterventionSpec {
    pub fn new(arm: Option<bool>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Intervention(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { arm, alpha })
    }

    /// Multiplicative factor applied to the mark's intensity under this
    /// intervention: censoring removed, z scaled, others untouched.
    pub fn scale(&self, mark: Mark) -> f64 {
        match mark {
            Mark::Censor => 0.0,
            Mark::Z => self.alpha,
            _ => 1.0,
        }
    }
}

/// One observed (time, mark) jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub mark: Mark,
}

/// One subject's trajectory on `[0, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub l0: f64,
    pub a0: Option<bool>,
    pub jumps: Vec<Jump>,
    pub tau: f64,
}

/// A maximal interval with frozen state, ending either at a jump or at the
/// end of observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub state: State,
    /// Mark of the jump at `end`, if the segment ends with one.
    pub jump: Option<Mark>,
}

impl Path {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Path(format!("tau must be > 0, got {}", self.tau)));
        }
        if !self.l0.is_finite() {
            return Err(Error::Path("l0 must be finite".into()));
        }
        let mut prev = 0.0;
        let mut n_ell = 0usize;
        let mut n_z = 0usize;
        for (i, jump) in self.jumps.iter().enumerate() {
            if !(jump.time > prev) {
                return Err(Error::Path(format!(
                    "jump times must be strictly increasing and > 0 (jump {i} at {})",
                    jump.time
                )));
            }
            if jump.time > self.tau {
                return Err(Error::Path(format!("jump at {} after tau={}", jump.time, self.tau)));
            }
            match jump.mark {
                Mark::Ell => n_ell += 1,
                Mark::Z => n_z += 1,
                _ => {}
            }
            if jump.mark.is_terminal() && i + 1 != self.jumps.len() {
                return Err(Error::Path("terminal jump must be last".into()));
            }
            prev = jump.time;
        }
        if n_ell > 1 || n_z > 1 {
            return Err(Error::Path("at most one jump each of marks ell and z".into()));
        }
        Ok(())
    }

    /// Terminal jump (outcome or censoring), if the path has one.
    pub fn terminal(&self) -> Option<Jump> {
        self.jumps.last().copied().filter(|j| j.mark.is_terminal())
    }

    /// End of observation: terminal jump time, or tau.
    pub fn end_time(&self) -> f64 {
        self.terminal().map_or(self.tau, |j| j.time)
    }

    /// N^x(tau): for the one-jump processes here, whether a jump of `mark`
    /// occurred (counts are frozen at the terminal event).
    pub fn count(&self, mark: Mark) -> u8 {
        self.jumps.iter().any(|j| j.mark == mark) as u8
    }

    /// N^z(t-): z-jumps strictly before `t`.
    pub fn n_z_before(&self, t: f64) -> u8 {
        self.jumps.iter().any(|j| j.mark == Mark::Z && j.time < t) as u8
    }

    /// State (N^ell(t-), N^z(t-)) just before `t`.
    pub fn state_before(&self, t: f64) -> State {
        let mut state = State::default();
        for jump in &self.jumps {
            if jump.time < t {
                state = state.with_jump(jump.mark);
            } else {
                break;
            }
        }
        state
    }

    /// Frozen-state segments covering `[0, end_time()]`.
    pub fn segments(&self) -> Vec<Segment> {
        let mut segments = Vec::with_capacity(self.jumps.len() + 1);
        let mut start = 0.0;
        let mut state = State::default();
        for jump in &self.jumps {
            segments.push(Segment { start, end: jump.time, state, jump: Some(jump.mark) });
            if jump.mark.is_terminal() {
                return segments;
            }
            state = state.with_jump(jump.mark);
            start = jump.time;
        }
        if start < self.tau {
            segments.push(Segment { start, end: self.tau, state, jump: None });
        }
        segments
    }

    /// Covariate value of A0 (0 when the scenario has no treatment variable).
    pub fn a0_value(&self) -> f64 {
        self.a0.map_or(0.0, |a| a as u8 as f64)
    }
}
