//! Calibration of the intensity-scaling factor: solve for the alpha that
//! drives the intermediate-event risk to a prescribed level (fixed value,
//! absolute or relative change from alpha=1, or the other arm's level),
//! estimate the curve derivative by central differences, and assemble
//! composite estimates of the outcome risk at the calibrated alpha with
//! influence-curve-based variance.
//!
//! All solvers run against a [`CurveEvaluator`], so the same search works on
//! the Monte Carlo oracle curve (truth mode), the deterministic
//! backward-recursion plug-in curve, and the targeted estimator curve
//! (estimation mode, with per-subject influence values for exact composite
//! variance).

use crate::error::{Error, Result};
use crate::fit::NuisanceSet;
use crate::markov::{self, ArmAverage, TargetEvent};
use crate::mc;
use crate::model::{
    IntensityModel, InterventionSpec, Mark, Path, Propensity, ValidatedScenario,
};
use crate::tmle::{self, EstimationConfig, TmleConfig};
use crate::weights::WeightTrace;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

/// What the calibrated alpha should achieve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetKind {
    /// psi_z(a, alpha) = theta.
    FixedTheta { theta: f64 },
    /// psi_z(a, alpha) = psi_z(a, 1) + delta.
    AbsoluteDelta { delta: f64 },
    /// psi_z(a, alpha) = rho * psi_z(a, 1).
    RelativeRho { rho: f64 },
    /// psi_z(a, alpha) = psi_z(1-a, 1).
    MatchOtherArm,
}

/// A calibration request: the kind plus the arm whose z-intensity is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationTarget {
    pub kind: TargetKind,
    pub arm: Option<bool>,
}

impl CalibrationTarget {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TargetKind::FixedTheta { theta } => {
                if !(theta > 0.0 && theta < 1.0) {
                    return Err(Error::Invalid(format!("theta must lie in (0,1), got {theta}")));
                }
            }
            TargetKind::AbsoluteDelta { delta } => {
                if !(delta > -1.0 && delta < 1.0) {
                    return Err(Error::Invalid(format!("delta must lie in (-1,1), got {delta}")));
                }
            }
            TargetKind::RelativeRho { rho } => {
                if !(rho > 0.0) {
                    return Err(Error::Invalid(format!("rho must be positive, got {rho}")));
                }
            }
            TargetKind::MatchOtherArm => {
                if self.arm.is_none() {
                    return Err(Error::MissingArm);
                }
            }
        }
        Ok(())
    }
}

/// One curve evaluation.
#[derive(Debug, Clone)]
pub struct CurveEval {
    pub alpha: f64,
    pub value: f64,
    pub se: f64,
    /// Per-subject influence values (estimation mode only).
    pub eic: Option<Vec<f64>>,
}

/// A point on the searched curve, for traces and CSV output.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TracePoint {
    pub alpha: f64,
    pub value: f64,
    pub se: f64,
}

/// Evaluate alpha -> (psi_z or psi_1) with uncertainty.
pub trait CurveEvaluator {
    fn evaluate(&mut self, alpha: f64) -> Result<CurveEval>;
    /// Effective sample size (subjects or MC replicates) for default
    /// tolerances and bandwidths.
    fn sample_size(&self) -> usize;
}

fn cache_key(alpha: f64) -> u64 {
    alpha.to_bits()
}

/// Monte Carlo oracle evaluator (truth mode) with common random numbers.
pub struct McCurveEvaluator<'a> {
    pub scenario: &'a ValidatedScenario,
    pub arm: Option<bool>,
    pub x: TargetEvent,
    pub reps: usize,
    pub seed: u64,
    cache: HashMap<u64, CurveEval>,
}

impl<'a> McCurveEvaluator<'a> {
    pub fn new(
        scenario: &'a ValidatedScenario,
        arm: Option<bool>,
        x: TargetEvent,
        reps: usize,
        seed: u64,
    ) -> Self {
        McCurveEvaluator { scenario, arm, x, reps, seed, cache: HashMap::new() }
    }
}

impl CurveEvaluator for McCurveEvaluator<'_> {
    fn evaluate(&mut self, alpha: f64) -> Result<CurveEval> {
        if let Some(hit) = self.cache.get(&cache_key(alpha)) {
            return Ok(hit.clone());
        }
        let itv = InterventionSpec::new(self.arm, alpha)?;
        let est = mc::mc_psi(self.scenario, &itv, self.x, self.reps, self.seed)?;
        let eval = CurveEval { alpha, value: est.value, se: est.se, eic: None };
        self.cache.insert(cache_key(alpha), eval.clone());
        Ok(eval)
    }

    fn sample_size(&self) -> usize {
        self.reps
    }
}

/// Deterministic g-computation evaluator on fitted or true models.
pub struct PluginCurveEvaluator {
    pub models: BTreeMap<Mark, IntensityModel>,
    pub j: u8,
    pub tau: f64,
    pub grid_size: usize,
    pub l0_nodes: Vec<f64>,
    pub arm: Option<bool>,
    pub propensity: Option<Propensity>,
    pub x: TargetEvent,
    /// Reported as the evaluation SE (solver tolerance scale).
    pub solver_tol: f64,
    cache: HashMap<u64, CurveEval>,
}

impl PluginCurveEvaluator {
    pub fn new(
        models: BTreeMap<Mark, IntensityModel>,
        j: u8,
        tau: f64,
        grid_size: usize,
        l0_nodes: Vec<f64>,
        arm: Option<bool>,
        propensity: Option<Propensity>,
        x: TargetEvent,
    ) -> Self {
        PluginCurveEvaluator {
            models,
            j,
            tau,
            grid_size,
            l0_nodes,
            arm,
            propensity,
            x,
            solver_tol: 1e-5,
            cache: HashMap::new(),
        }
    }
}

impl CurveEvaluator for PluginCurveEvaluator {
    fn evaluate(&mut self, alpha: f64) -> Result<CurveEval> {
        if let Some(hit) = self.cache.get(&cache_key(alpha)) {
            return Ok(hit.clone());
        }
        let itv = InterventionSpec::new(self.arm, alpha)?;
        let arm_avg = match (self.arm, &self.propensity) {
            (Some(a), _) => ArmAverage::Forced(a),
            (None, Some(p)) => ArmAverage::Natural(p),
            (None, None) => ArmAverage::NoArm,
        };
        let value = markov::plugin_psi(
            &self.models,
            self.j,
            &itv,
            self.x,
            self.tau,
            self.grid_size,
            &self.l0_nodes,
            arm_avg,
        )?;
        let eval = CurveEval { alpha, value, se: self.solver_tol, eic: None };
        self.cache.insert(cache_key(alpha), eval.clone());
        Ok(eval)
    }

    fn sample_size(&self) -> usize {
        self.l0_nodes.len().max(2)
    }
}

/// Targeted-estimator evaluator (estimation mode): every evaluation is a full
/// targeting run at that alpha, sharing the initial nuisance fits.
pub struct TmleCurveEvaluator<'a> {
    pub paths: &'a [Path],
    pub j: u8,
    pub tau: f64,
    pub nuisances: &'a NuisanceSet,
    pub arm: Option<bool>,
    pub x: TargetEvent,
    pub cfg: TmleConfig,
    cache: HashMap<u64, CurveEval>,
    /// Weight diagnostics of the most extreme evaluation seen.
    pub max_weight_seen: f64,
}

impl<'a> TmleCurveEvaluator<'a> {
    pub fn new(
        paths: &'a [Path],
        j: u8,
        tau: f64,
        nuisances: &'a NuisanceSet,
        arm: Option<bool>,
        x: TargetEvent,
        cfg: TmleConfig,
    ) -> Self {
        TmleCurveEvaluator {
            paths,
            j,
            tau,
            nuisances,
            arm,
            x,
            cfg,
            cache: HashMap::new(),
            max_weight_seen: 0.0,
        }
    }
}

impl CurveEvaluator for TmleCurveEvaluator<'_> {
    fn evaluate(&mut self, alpha: f64) -> Result<CurveEval> {
        if let Some(hit) = self.cache.get(&cache_key(alpha)) {
            return Ok(hit.clone());
        }
        let itv = InterventionSpec::new(self.arm, alpha)?;
        let fit = tmle::target(self.paths, self.j, self.tau, self.nuisances, &itv, self.x, &self.cfg)?;
        self.max_weight_seen = self.max_weight_seen.max(fit.report.weight_diagnostics.max_weight);
        let eval = CurveEval {
            alpha,
            value: fit.report.psi_hat,
            se: fit.report.se,
            eic: Some(fit.eic),
        };
        self.cache.insert(cache_key(alpha), eval.clone());
        Ok(eval)
    }

    fn sample_size(&self) -> usize {
        self.paths.len()
    }
}

/// Options for the alpha search.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Convergence tolerance; `None` uses se(first evaluation)/log(n).
    pub c_n: Option<f64>,
    pub bracket: (f64, f64),
    pub max_steps: usize,
    /// Feasibility bound, when already known: level must lie in (0, l_hat).
    pub l_hat: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { c_n: None, bracket: (0.02, 50.0), max_steps: 80, l_hat: None }
    }
}

/// Search outcome with the evaluation trace (in evaluation order).
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub alpha_hat: f64,
    pub at_alpha: CurveEval,
    pub c_n: f64,
    pub trace: Vec<TracePoint>,
    /// Ordered-trace points where the value decreases by more than 2 c_n
    /// (flagged, never reordered).
    pub monotonicity_violations: usize,
}

/// Find alpha with |psi_z(alpha) - level| <= c_n by the expansion/contraction
/// walk: 1.25x while below the level moving up, 0.8x while above moving down,
/// midpoint bisection once the walk reverses.
pub fn solve_alpha(
    evaluator: &mut dyn CurveEvaluator,
    level: f64,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let (lo, hi) = opts.bracket;
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::Invalid(format!("bad bracket [{lo}, {hi}]")));
    }
    if let Some(l_hat) = opts.l_hat {
        if !(level > 0.0 && level < l_hat) {
            return Err(Error::InfeasibleTarget { level, l_hat });
        }
    }

    let n = evaluator.sample_size() as f64;
    let mut trace: Vec<CurveEval> = Vec::new();
    let mut eval_at = |alpha: f64, trace: &mut Vec<CurveEval>| -> Result<CurveEval> {
        let e = evaluator.evaluate(alpha)?;
        trace.push(e.clone());
        Ok(e)
    };

    let mut current = 1.0f64.clamp(lo, hi);
    let first = eval_at(current, &mut trace)?;
    let c_n = opts.c_n.unwrap_or_else(|| (first.se / n.ln().max(2.0)).max(1e-10));

    let finish = |alpha_hat: f64, at: CurveEval, trace: Vec<CurveEval>| -> SolveResult {
        let mut points: Vec<TracePoint> =
            trace.iter().map(|e| TracePoint { alpha: e.alpha, value: e.value, se: e.se }).collect();
        let mut ordered = points.clone();
        ordered.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        ordered.dedup_by(|a, b| a.alpha == b.alpha);
        let monotonicity_violations = ordered
            .windows(2)
            .filter(|w| w[1].value < w[0].value - 2.0 * c_n)
            .count();
        points.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        points.dedup_by(|a, b| a.alpha == b.alpha);
        SolveResult { alpha_hat, at_alpha: at, c_n, trace: points, monotonicity_violations }
    };

    if (first.value - level).abs() <= c_n {
        return Ok(finish(current, first.clone(), trace));
    }
    // Expansion (1.25x) while the level is above every value seen, contraction
    // (0.8x) while below, midpoint bisection once the root is bracketed by
    // (below, above) evaluations.
    let mut below: Option<f64> = None; // largest alpha with value < level
    let mut above: Option<f64> = None; // smallest alpha with value > level
    if first.value < level {
        below = Some(current);
        current *= 1.25;
    } else {
        above = Some(current);
        current *= 0.8;
    }

    for _ in 0..opts.max_steps {
        current = current.clamp(lo, hi);
        if Some(current) == below || Some(current) == above {
            return Err(Error::BracketExhausted { lo, hi, steps: trace.len() });
        }
        let eval = eval_at(current, &mut trace)?;
        if (eval.value - level).abs() <= c_n {
            return Ok(finish(current, eval, trace));
        }
        if eval.value < level {
            below = Some(below.map_or(current, |b| b.max(current)));
        } else {
            above = Some(above.map_or(current, |a| a.min(current)));
        }
        current = match (below, above) {
            (Some(b), Some(a)) => 0.5 * (b + a),
            (Some(b), None) => 1.25 * b,
            (None, Some(a)) => 0.8 * a,
            (None, None) => unreachable!(),
        };
    }
    Err(Error::BracketExhausted { lo, hi, steps: trace.len() })
}

/// Central-difference derivative of the evaluator's curve.
#[derive(Debug, Clone)]
pub struct DerivativeEstimate {
    pub kappa: f64,
    pub h: f64,
    pub lower: CurveEval,
    pub upper: CurveEval,
}

/// d psi / d alpha at `alpha` by (psi(alpha+h) - psi(alpha-h)) / 2h with
/// default bandwidth h = n^(-1/6) max(alpha, 1).
pub fn derivative(
    evaluator: &mut dyn CurveEvaluator,
    alpha: f64,
    h: Option<f64>,
) -> Result<DerivativeEstimate> {
    let n = evaluator.sample_size() as f64;
    let mut h = h.unwrap_or_else(|| n.powf(-1.0 / 6.0) * alpha.max(1.0));
    if h <= 0.0 {
        return Err(Error::Invalid("derivative step must be positive".into()));
    }
    if alpha - h <= 0.0 {
        h = 0.5 * alpha;
    }
    let lower = evaluator.evaluate(alpha - h)?;
    let upper = evaluator.evaluate(alpha + h)?;
    let delta = upper.value - lower.value;
    // Same-sample evaluations are strongly correlated: use the paired
    // influence-value difference for the noise scale when available, the
    // independent combination otherwise.
    let noise = match (&lower.eic, &upper.eic) {
        (Some(lo), Some(hi)) if lo.len() == hi.len() => {
            let d: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
            eic_se(&d)
        }
        _ => (upper.se * upper.se + lower.se * lower.se).sqrt(),
    };
    if delta.abs() < 2.0 * noise {
        return Err(Error::NoisyDerivative { h, delta: delta.abs(), noise: 2.0 * noise });
    }
    Ok(DerivativeEstimate { kappa: delta / (2.0 * h), h, lower, upper })
}

// Like [`derivative`] but returns the (possibly noise-dominated) estimate
// with a flag instead of erroring. Used for the outcome-curve slope kappa_1,
// which only scales a variance correction: a noisy near-zero slope should
// not abort the composite, unlike kappa_z which divides the influence curve.
fn derivative_lenient(
    evaluator: &mut dyn CurveEvaluator,
    alpha: f64,
    h: Option<f64>,
) -> Result<(f64, bool)> {
    match derivative(evaluator, alpha, h) {
        Ok(est) => Ok((est.kappa, false)),
        Err(Error::NoisyDerivative { h, .. }) => {
            let lower = evaluator.evaluate(alpha - h)?;
            let upper = evaluator.evaluate(alpha + h)?;
            Ok(((upper.value - lower.value) / (2.0 * h), true))
        }
        Err(e) => Err(e),
    }
}

/// Feasibility diagnostics: the achievable-fraction proxy, target margin, and
/// the curve on a display grid.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    /// psi_z at the large-alpha proxy (lower bound of the true limit).
    pub l_hat: f64,
    pub l_hat_alpha: f64,
    pub level: Option<f64>,
    pub margin: Option<f64>,
    pub feasible: Option<bool>,
    pub curve: Vec<TracePoint>,
    /// Per grid alpha: largest product weight over subjects (estimation mode).
    pub weight_extremes: Vec<(f64, f64)>,
}

/// Default display grid for feasibility curves.
pub const FEASIBILITY_GRID: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

pub fn feasibility_report(
    evaluator: &mut dyn CurveEvaluator,
    level: Option<f64>,
    l_hat_alpha: f64,
    grid: &[f64],
    weight_extremes: Vec<(f64, f64)>,
) -> Result<FeasibilityReport> {
    let l_hat = evaluator.evaluate(l_hat_alpha)?.value;
    let mut curve = Vec::new();
    for &alpha in grid {
        let e = evaluator.evaluate(alpha)?;
        curve.push(TracePoint { alpha, value: e.value, se: e.se });
    }
    Ok(FeasibilityReport {
        l_hat,
        l_hat_alpha,
        level,
        margin: level.map(|l| l_hat - l),
        feasible: level.map(|l| l > 0.0 && l < l_hat),
        curve,
        weight_extremes,
    })
}

/// Largest clever product weight over subjects and times, per alpha
/// (diagnostic for instability near a candidate calibration).
pub fn weight_extremes(
    paths: &[Path],
    nuisances: &NuisanceSet,
    arm: Option<bool>,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let censor = &nuisances.models[&Mark::Censor];
    let z = &nuisances.models[&Mark::Z];
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut max = 0.0f64;
        for path in paths {
            let pi_own = match arm {
                Some(a) if path.a0 == Some(a) => Some(nuisances.propensity.prob(a, path.l0)?),
                _ => None,
            };
            let trace = WeightTrace::new(censor, z, path, arm, pi_own, alpha)?;
            max = max.max(trace.max_product(&path.segments()));
        }
        out.push((alpha, max));
    }
    Ok(out)
}

/// Composite estimate of psi_1 at the calibrated alpha.
#[derive(Debug, Clone, Serialize)]
pub struct CompositeReport {
    pub target: CalibrationTarget,
    pub mode: String,
    pub level: f64,
    pub l_hat: f64,
    pub margin: f64,
    pub alpha_hat: f64,
    pub alpha_se: f64,
    pub psi1_hat: f64,
    pub psi1_se: f64,
    pub psi1_ci95: (f64, f64),
    /// psi_z at the solved alpha (fixed-point residual |value - level| <= c_n).
    pub psi_z_at_alpha: f64,
    pub c_n: f64,
    pub kappa_z: f64,
    pub kappa_1: f64,
    /// The outcome-curve slope was below its sampling noise (its variance
    /// contribution is kept but unreliable).
    pub kappa_1_noisy: bool,
    pub psi1_at_one: Option<f64>,
    pub trace: Vec<TracePoint>,
    pub monotonicity_violations: usize,
    pub decomposition: Option<Decomposition>,
}

/// Indirect/direct split of the between-arm effect with the z-risk matched
/// across arms (only for the match-other-arm target).
#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    /// psi1(a,1) - psi1(a, alpha_hat).
    pub indirect: f64,
    pub indirect_se: f64,
    /// psi1(a, alpha_hat) - psi1(1-a, 1).
    pub direct: f64,
    pub direct_se: f64,
    /// psi1(a,1) - psi1(1-a,1); equals indirect + direct exactly.
    pub total: f64,
    pub total_se: f64,
}

/// Composite options.
#[derive(Debug, Clone, Copy)]
pub struct CompositeOptions {
    pub solve: SolveOptions,
    /// Derivative bandwidth override.
    pub h: Option<f64>,
    /// Large-alpha proxy for the achievable fraction.
    pub l_hat_alpha: f64,
    /// Compute the indirect/direct decomposition (match target only).
    pub decompose: bool,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        CompositeOptions {
            solve: SolveOptions::default(),
            h: None,
            l_hat_alpha: 50.0,
            decompose: false,
        }
    }
}

// Everything the composite pipeline needs from a mode (estimation or oracle):
// evaluators for psi_z and psi_1 in the target arm, and in the other arm for
// the match/decomposition legs.
struct Evaluators<'a> {
    z_a: &'a mut dyn CurveEvaluator,
    z_other: Option<&'a mut dyn CurveEvaluator>,
    one_a: &'a mut dyn CurveEvaluator,
    one_other: Option<&'a mut dyn CurveEvaluator>,
    l_hat: f64,
}

fn eic_se(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt() / n.sqrt()
}

fn composite_core(
    target: CalibrationTarget,
    mode: &str,
    mut ev: Evaluators,
    opts: &CompositeOptions,
) -> Result<CompositeReport> {
    target.validate()?;

    // Resolve the level the z-curve must hit.
    let mut z_at_one: Option<CurveEval> = None;
    let mut z_other_at_one: Option<CurveEval> = None;
    let level = match target.kind {
        TargetKind::FixedTheta { theta } => theta,
        TargetKind::AbsoluteDelta { delta } => {
            let e = ev.z_a.evaluate(1.0)?;
            let level = e.value + delta;
            z_at_one = Some(e);
            level
        }
        TargetKind::RelativeRho { rho } => {
            let e = ev.z_a.evaluate(1.0)?;
            let level = rho * e.value;
            z_at_one = Some(e);
            level
        }
        TargetKind::MatchOtherArm => {
            let other = ev
                .z_other
                .as_deref_mut()
                .ok_or_else(|| Error::Invalid("match target needs the other-arm evaluator".into()))?
                .evaluate(1.0)?;
            let level = other.value;
            z_other_at_one = Some(other);
            level
        }
    };

    // Feasibility gate before any solving.
    if !(level > 0.0 && level < ev.l_hat) {
        return Err(Error::InfeasibleTarget { level, l_hat: ev.l_hat });
    }

    let solve_opts = SolveOptions { l_hat: Some(ev.l_hat), ..opts.solve };
    let solved = solve_alpha(ev.z_a, level, &solve_opts)?;
    let alpha_hat = solved.alpha_hat;

    let kappa_z = derivative(ev.z_a, alpha_hat, opts.h)?.kappa;
    let (kappa_1, kappa_1_noisy) = derivative_lenient(ev.one_a, alpha_hat, opts.h)?;
    let psi1 = ev.one_a.evaluate(alpha_hat)?;
    let z_at_alpha = &solved.at_alpha;

    // Influence curve of alpha_hat per target kind, then the composite
    // psi_1 influence curve; falls back to a delta-method combination when
    // per-subject values are unavailable (oracle mode).
    let all_eic = psi1.eic.is_some()
        && z_at_alpha.eic.is_some()
        && z_at_one.as_ref().map_or(true, |e| e.eic.is_some())
        && z_other_at_one.as_ref().map_or(true, |e| e.eic.is_some());

    let (alpha_se, psi1_se) = if all_eic {
        let phi_z_alpha = z_at_alpha.eic.as_ref().expect("checked");
        let n = phi_z_alpha.len();
        let phi_alpha: Vec<f64> = match target.kind {
            TargetKind::FixedTheta { .. } => {
                phi_z_alpha.iter().map(|z| -z / kappa_z).collect()
            }
            TargetKind::AbsoluteDelta { .. } => {
                let one = z_at_one.as_ref().and_then(|e| e.eic.as_ref()).expect("checked");
                (0..n).map(|i| (one[i] - phi_z_alpha[i]) / kappa_z).collect()
            }
            TargetKind::RelativeRho { rho } => {
                let one = z_at_one.as_ref().and_then(|e| e.eic.as_ref()).expect("checked");
                (0..n).map(|i| (rho * one[i] - phi_z_alpha[i]) / kappa_z).collect()
            }
            TargetKind::MatchOtherArm => {
                let other = z_other_at_one.as_ref().and_then(|e| e.eic.as_ref()).expect("checked");
                (0..n).map(|i| (other[i] - phi_z_alpha[i]) / kappa_z).collect()
            }
        };
        let phi1 = psi1.eic.as_ref().expect("checked");
        let composite: Vec<f64> =
            (0..n).map(|i| phi1[i] + kappa_1 * phi_alpha[i]).collect();
        (eic_se(&phi_alpha), eic_se(&composite))
    } else {
        let se_alpha = match target.kind {
            TargetKind::FixedTheta { .. } => z_at_alpha.se / kappa_z.abs(),
            TargetKind::AbsoluteDelta { .. } | TargetKind::MatchOtherArm => {
                let one_se = z_at_one
                    .as_ref()
                    .or(z_other_at_one.as_ref())
                    .map_or(0.0, |e| e.se);
                (one_se * one_se + z_at_alpha.se * z_at_alpha.se).sqrt() / kappa_z.abs()
            }
            TargetKind::RelativeRho { rho } => {
                let one_se = z_at_one.as_ref().map_or(0.0, |e| e.se);
                (rho * rho * one_se * one_se + z_at_alpha.se * z_at_alpha.se).sqrt()
                    / kappa_z.abs()
            }
        };
        let se1 = (psi1.se * psi1.se + kappa_1 * kappa_1 * se_alpha * se_alpha).sqrt();
        (se_alpha, se1)
    };

    // Indirect/direct decomposition at the matched level.
    let decomposition = if opts.decompose && target.kind == TargetKind::MatchOtherArm {
        let one_at_one = ev.one_a.evaluate(1.0)?;
        let other_ev = ev
            .one_other
            .as_deref_mut()
            .ok_or_else(|| Error::Invalid("decomposition needs the other-arm psi_1 evaluator".into()))?;
        let other_at_one = other_ev.evaluate(1.0)?;
        let indirect = one_at_one.value - psi1.value;
        let direct = psi1.value - other_at_one.value;
        let total = indirect + direct;
        let (indirect_se, direct_se, total_se) = match (&one_at_one.eic, &psi1.eic, &other_at_one.eic)
        {
            (Some(e11), Some(e1a), Some(e01)) if all_eic => {
                let phi_alpha_term = |i: usize| -> f64 {
                    // composite influence of psi1(a, alpha_hat)
                    let z_alpha = z_at_alpha.eic.as_ref().expect("checked");
                    let other = z_other_at_one.as_ref().and_then(|e| e.eic.as_ref()).expect("checked");
                    e1a[i] + kappa_1 * (other[i] - z_alpha[i]) / kappa_z
                };
                let n = e11.len();
                let ind: Vec<f64> = (0..n).map(|i| e11[i] - phi_alpha_term(i)).collect();
                let dir: Vec<f64> = (0..n).map(|i| phi_alpha_term(i) - e01[i]).collect();
                let tot: Vec<f64> = (0..n).map(|i| e11[i] - e01[i]).collect();
                (eic_se(&ind), eic_se(&dir), eic_se(&tot))
            }
            _ => {
                let a = one_at_one.se;
                let b = (psi1.se * psi1.se + kappa_1 * kappa_1 * alpha_se * alpha_se).sqrt();
                let c = other_at_one.se;
                ((a * a + b * b).sqrt(), (b * b + c * c).sqrt(), (a * a + c * c).sqrt())
            }
        };
        Some(Decomposition { indirect, indirect_se, direct, direct_se, total, total_se })
    } else {
        None
    };

    Ok(CompositeReport {
        target,
        mode: mode.to_string(),
        level,
        l_hat: ev.l_hat,
        margin: ev.l_hat - level,
        alpha_hat,
        alpha_se,
        psi1_hat: psi1.value,
        psi1_se,
        psi1_ci95: (psi1.value - 1.96 * psi1_se, psi1.value + 1.96 * psi1_se),
        psi_z_at_alpha: z_at_alpha.value,
        c_n: solved.c_n,
        kappa_z,
        kappa_1,
        kappa_1_noisy,
        psi1_at_one: None,
        trace: solved.trace,
        monotonicity_violations: solved.monotonicity_violations,
        decomposition,
    })
}

/// Estimation-mode composite pipeline: shared initial fits, targeted
/// evaluations inside the alpha search, exact composite influence curve.
pub fn composite_estimate(
    paths: &[Path],
    j: u8,
    tau: f64,
    target: CalibrationTarget,
    est: &EstimationConfig,
    opts: &CompositeOptions,
) -> Result<CompositeReport> {
    target.validate()?;
    let nuisances = crate::fit::fit_all(
        paths,
        j,
        &est.misspec,
        est.propensity.unwrap_or(crate::fit::PropensityKind::Constant),
    )?;

    // Achievable-fraction proxy from the (untargeted) plug-in at large alpha:
    // a targeted run there would put extreme likelihood-ratio weights in the
    // score, which is the instability the diagnostics warn about.
    let l0s: Vec<f64> = paths.iter().map(|p| p.l0).collect();
    let itv_big = InterventionSpec::new(target.arm, opts.l_hat_alpha)?;
    let arm_avg = match (target.arm, &nuisances.propensity) {
        (Some(a), _) => ArmAverage::Forced(a),
        (None, crate::fit::PropensityFit::Model(p)) => ArmAverage::Natural(p),
        (None, crate::fit::PropensityFit::NoArm) => ArmAverage::NoArm,
    };
    let l_hat = markov::plugin_psi(
        &nuisances.models,
        j,
        &itv_big,
        TargetEvent::Z,
        tau,
        est.tmle.grid_size,
        &l0s,
        arm_avg,
    )?;

    let mut z_a =
        TmleCurveEvaluator::new(paths, j, tau, &nuisances, target.arm, TargetEvent::Z, est.tmle);
    let mut one_a = TmleCurveEvaluator::new(
        paths,
        j,
        tau,
        &nuisances,
        target.arm,
        TargetEvent::Outcome1,
        est.tmle,
    );
    let other_arm = target.arm.map(|a| !a);
    let mut z_other = other_arm.map(|a| {
        TmleCurveEvaluator::new(paths, j, tau, &nuisances, Some(a), TargetEvent::Z, est.tmle)
    });
    let mut one_other = other_arm.map(|a| {
        TmleCurveEvaluator::new(paths, j, tau, &nuisances, Some(a), TargetEvent::Outcome1, est.tmle)
    });

    composite_core(
        target,
        "estimate",
        Evaluators {
            z_a: &mut z_a,
            z_other: z_other.as_mut().map(|e| e as &mut dyn CurveEvaluator),
            one_a: &mut one_a,
            one_other: one_other.as_mut().map(|e| e as &mut dyn CurveEvaluator),
            l_hat,
        },
        opts,
    )
}

/// Truth-mode composite pipeline on the Monte Carlo oracle curve: identical
/// solvers with MC standard errors in place of influence-curve ones.
pub fn composite_oracle(
    scenario: &ValidatedScenario,
    target: CalibrationTarget,
    reps: usize,
    seed: u64,
    opts: &CompositeOptions,
) -> Result<CompositeReport> {
    target.validate()?;
    let mut z_a = McCurveEvaluator::new(scenario, target.arm, TargetEvent::Z, reps, seed);
    let l_hat = z_a.evaluate(opts.l_hat_alpha)?.value;
    let mut one_a = McCurveEvaluator::new(scenario, target.arm, TargetEvent::Outcome1, reps, seed);
    let other_arm = target.arm.map(|a| !a);
    let mut z_other =
        other_arm.map(|a| McCurveEvaluator::new(scenario, Some(a), TargetEvent::Z, reps, seed));
    let mut one_other = other_arm
        .map(|a| McCurveEvaluator::new(scenario, Some(a), TargetEvent::Outcome1, reps, seed));

    let mut report = composite_core(
        target,
        "oracle",
        Evaluators {
            z_a: &mut z_a,
            z_other: z_other.as_mut().map(|e| e as &mut dyn CurveEvaluator),
            one_a: &mut one_a,
            one_other: one_other.as_mut().map(|e| e as &mut dyn CurveEvaluator),
            l_hat,
        },
        opts,
    )?;
    report.psi1_at_one = Some(one_a.evaluate(1.0)?.value);
    Ok(report)
}

/// Decomposition of psi1(1,1) - psi1(0,alpha) at a fixed alpha into the
/// within-arm effect of modifying the z-process and the between-arm effect,
/// in estimation mode (three targeted runs; components sum to the total
/// exactly because the total is assembled from the same runs).
#[derive(Debug, Clone, Serialize)]
pub struct FixedAlphaDecomposition {
    pub alpha: f64,
    pub psi1_treated_at_one: f64,
    pub psi1_treated_at_alpha: f64,
    pub psi1_control_at_alpha: f64,
    pub modify_z: f64,
    pub modify_z_se: f64,
    pub baseline_treatment: f64,
    pub baseline_treatment_se: f64,
    pub total: f64,
    pub total_se: f64,
}

pub fn decompose_total_joint(
    paths: &[Path],
    j: u8,
    tau: f64,
    alpha: f64,
    est: &EstimationConfig,
) -> Result<FixedAlphaDecomposition> {
    let nuisances = crate::fit::fit_all(
        paths,
        j,
        &est.misspec,
        est.propensity.unwrap_or(crate::fit::PropensityKind::Constant),
    )?;
    let run = |arm: bool, a: f64| -> Result<tmle::TargetedFit> {
        let itv = InterventionSpec::new(Some(arm), a)?;
        tmle::target(paths, j, tau, &nuisances, &itv, TargetEvent::Outcome1, &est.tmle)
    };
    let treated_one = run(true, 1.0)?;
    let treated_alpha = run(true, alpha)?;
    let control_alpha = run(false, alpha)?;

    let n = paths.len();
    let diff_se = |a: &[f64], b: &[f64]| -> f64 {
        let d: Vec<f64> = (0..n).map(|i| a[i] - b[i]).collect();
        eic_se(&d)
    };
    let modify_z = treated_one.report.psi_hat - treated_alpha.report.psi_hat;
    let baseline = treated_alpha.report.psi_hat - control_alpha.report.psi_hat;
    Ok(FixedAlphaDecomposition {
        alpha,
        psi1_treated_at_one: treated_one.report.psi_hat,
        psi1_treated_at_alpha: treated_alpha.report.psi_hat,
        psi1_control_at_alpha: control_alpha.report.psi_hat,
        modify_z,
        modify_z_se: diff_se(&treated_one.eic, &treated_alpha.eic),
        baseline_treatment: baseline,
        baseline_treatment_se: diff_se(&treated_alpha.eic, &control_alpha.eic),
        total: modify_z + baseline,
        total_se: diff_se(&treated_one.eic, &control_alpha.eic),
    })
}
