//! Maximum-likelihood fitting of the cause-specific Weibull intensity models
//! and the baseline treatment propensity from an observed cohort.
//!
//! The log-likelihood factorizes over marks: for mark x it is
//! `Σ_events log λ^x(t) - Σ_segments ∫ λ^x`, with closed-form exposure
//! integrals. Optimization is Newton in (log η, log ν, β) with analytic
//! gradient and Hessian, step-halving line search, and a gradient-ascent
//! fallback when the Hessian is not usable. Covariate columns with no
//! variation in the data (including the structurally-zero own-state columns)
//! are dropped automatically; deliberate misspecification drops further
//! columns via [`CovariateSpec`].

use crate::error::{Error, Result};
use crate::model::{admissible, IntensityModel, Mark, Path, Propensity};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which covariates a fitted intensity model may use. Dropping a covariate
/// that matters in truth creates controlled misspecification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub a0: bool,
    pub l0: bool,
    pub z: bool,
    pub ell: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec { a0: true, l0: true, z: true, ell: true }
    }
}

impl CovariateSpec {
    pub const NONE: CovariateSpec = CovariateSpec { a0: false, l0: false, z: false, ell: false };
}

/// Options for one intensity fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub covariates: CovariateSpec,
    /// Fix the Weibull shape instead of estimating it.
    pub fix_nu: Option<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { covariates: CovariateSpec::default(), fix_nu: None, max_iter: 200, grad_tol: 1e-9 }
    }
}

/// A fitted intensity model with optimizer diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct IntensityFit {
    pub mark: Mark,
    pub model: IntensityModel,
    pub events: usize,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub zero_events: bool,
}

/// Fitted propensity; `NoArm` for cohorts without a treatment variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityFit {
    NoArm,
    Model(Propensity),
}

impl PropensityFit {
    /// π̂(arm | l0); errors for arm queries on a no-arm fit.
    pub fn prob(&self, arm: bool, l0: f64) -> Result<f64> {
        match self {
            PropensityFit::NoArm => Err(Error::MissingArm),
            PropensityFit::Model(p) => {
                let p1 = p.prob1(l0);
                Ok(if arm { p1 } else { 1.0 - p1 })
            }
        }
    }
}

/// All nuisance components for estimation: one fitted model per mark, the
/// propensity, and a record of intentional misspecification.
#[derive(Debug, Clone, Serialize)]
pub struct NuisanceSet {
    pub models: BTreeMap<Mark, IntensityModel>,
    pub propensity: PropensityFit,
    pub fits: Vec<IntensityFit>,
    pub misspec: BTreeMap<Mark, CovariateSpec>,
}

// One fit's internal data: event rows and exposure segments in design space.
struct FitData {
    // (log t, x) per event
    events: Vec<(f64, Vec<f64>)>,
    // (start, end, x) per exposure segment
    segments: Vec<(f64, f64, Vec<f64>)>,
    n_cov: usize,
    labels: Vec<&'static str>,
}

fn assemble(paths: &[Path], mark: Mark, covariates: CovariateSpec) -> FitData {
    // Candidate columns in fixed order; own-state columns are structurally
    // zero on the mark's risk set and get dropped by the variation check.
    let mut cols: Vec<(&'static str, Box<dyn Fn(&Path, crate::model::State) -> f64>)> = Vec::new();
    if covariates.a0 {
        cols.push(("a0", Box::new(|p: &Path, _| p.a0_value())));
    }
    if covariates.l0 {
        cols.push(("l0", Box::new(|p: &Path, _| p.l0)));
    }
    if covariates.z && mark != Mark::Z {
        cols.push(("n_z", Box::new(|_, s: crate::model::State| s.n_z as u8 as f64)));
    }
    if covariates.ell && mark != Mark::Ell {
        cols.push(("n_ell", Box::new(|_, s: crate::model::State| s.n_ell as u8 as f64)));
    }

    let mut events = Vec::new();
    let mut segments = Vec::new();
    for path in paths {
        for seg in path.segments() {
            if !admissible(mark, seg.state) {
                continue;
            }
            let x: Vec<f64> = cols.iter().map(|(_, f)| f(path, seg.state)).collect();
            segments.push((seg.start, seg.end, x.clone()));
            if seg.jump == Some(mark) {
                events.push((seg.end.ln(), x));
            }
        }
    }

    // Drop columns without variation over the risk set (non-identified).
    let mut keep = Vec::new();
    for c in 0..cols.len() {
        let mut values = segments.iter().map(|(_, _, x)| x[c]);
        let first = values.next().unwrap_or(0.0);
        if values.any(|v| v != first) {
            keep.push(c);
        }
    }
    let project = |x: &Vec<f64>| -> Vec<f64> { keep.iter().map(|&c| x[c]).collect() };
    FitData {
        events: events.iter().map(|(t, x)| (*t, project(x))).collect(),
        segments: segments.iter().map(|(s, e, x)| (*s, *e, project(x))).collect(),
        n_cov: keep.len(),
        labels: keep.iter().map(|&c| cols[c].0).collect(),
    }
}

// x^nu * ln(x)^k with the x -> 0 limit.
fn pow_log(x: f64, nu: f64, k: u32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    x.powf(nu) * x.ln().powi(k as i32)
}

struct Objective<'a> {
    data: &'a FitData,
    fix_nu: Option<f64>,
}

impl Objective<'_> {
    // theta = [u = log eta, (v = log nu if free), beta...]
    fn dim(&self) -> usize {
        1 + (self.fix_nu.is_none() as usize) + self.data.n_cov
    }

    fn unpack(&self, theta: &[f64]) -> (f64, f64, usize) {
        let eta = theta[0].exp();
        let (nu, beta_at) = match self.fix_nu {
            Some(nu) => (nu, 1),
            None => (theta[1].exp(), 2),
        };
        (eta, nu, beta_at)
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let (eta, nu, beta_at) = self.unpack(theta);
        let beta = &theta[beta_at..];
        let mut ll = 0.0;
        for (log_t, x) in &self.data.events {
            let bx: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            ll += theta[0] + nu.ln() + (nu - 1.0) * log_t + bx;
        }
        for (s, e, x) in &self.data.segments {
            let bx: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            ll -= eta * bx.exp() * (e.powf(nu) - s.powf(nu));
        }
        ll
    }

    fn grad_hess(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (eta, nu, beta_at) = self.unpack(theta);
        let beta = &theta[beta_at..];
        let d = self.dim();
        let free_nu = self.fix_nu.is_none();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];

        for (log_t, x) in &self.data.events {
            g[0] += 1.0;
            if free_nu {
                g[1] += 1.0 + nu * log_t;
                h[1 * d + 1] += nu * log_t;
            }
            for (r, xv) in x.iter().enumerate() {
                g[beta_at + r] += xv;
            }
        }
        for (s, e, x) in &self.data.segments {
            let bx: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            let scale = eta * bx.exp();
            let a0 = e.powf(nu) - s.powf(nu);
            let a1 = nu * (pow_log(*e, nu, 1) - pow_log(*s, nu, 1));
            let a2 = a1 + nu * nu * (pow_log(*e, nu, 2) - pow_log(*s, nu, 2));

            g[0] -= scale * a0;
            h[0] -= scale * a0; // h[0*d+0]
            if free_nu {
                g[1] -= scale * a1;
                h[1] -= scale * a1; // h[0*d+1]
                h[d] -= scale * a1; // h[1*d+0]
                h[1 * d + 1] -= scale * a2;
            }
            for (r, xr) in x.iter().enumerate() {
                let ir = beta_at + r;
                g[ir] -= scale * a0 * xr;
                h[ir] -= scale * a0 * xr; // h[0*d+ir]
                h[ir * d] -= scale * a0 * xr; // h[ir*d+0]
                if free_nu {
                    h[d + ir] -= scale * a1 * xr;
                    h[ir * d + 1] -= scale * a1 * xr;
                }
                for (q, xq) in x.iter().enumerate() {
                    h[ir * d + beta_at + q] -= scale * a0 * xr * xq;
                }
            }
        }
        (g, h)
    }
}

// Solve H x = b by Gaussian elimination with partial pivoting; None if
// numerically singular.
fn solve_linear(h: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut a = h.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..d {
        let (pivot_row, pivot) = (col..d)
            .map(|r| (r, a[r * d + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pivot < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for j in 0..d {
                a.swap(col * d + j, pivot_row * d + j);
            }
            rhs.swap(col, pivot_row);
        }
        for r in (col + 1)..d {
            let f = a[r * d + col] / a[col * d + col];
            for j in col..d {
                a[r * d + j] -= f * a[col * d + j];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let mut acc = rhs[r];
        for j in (r + 1)..d {
            acc -= a[r * d + j] * x[j];
        }
        x[r] = acc / a[r * d + r];
    }
    Some(x)
}

/// Fit the Weibull intensity of `mark` by maximum likelihood.
pub fn fit_intensity(paths: &[Path], mark: Mark, opts: &FitOptions) -> Result<IntensityFit> {
    let data = assemble(paths, mark, opts.covariates);
    let n_events = data.events.len();
    if n_events == 0 {
        eprintln!("warning: no events of mark {mark}; returning zero-hazard model");
        return Ok(IntensityFit {
            mark,
            model: IntensityModel { eta: 0.0, nu: opts.fix_nu.unwrap_or(1.0), ..Default::default() },
            events: 0,
            log_likelihood: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            zero_events: true,
        });
    }
    let objective = Objective { data: &data, fix_nu: opts.fix_nu };
    let d = objective.dim();

    // Exponential start: eta = events / exposure at nu = 1, beta = 0.
    let exposure: f64 = data.segments.iter().map(|(s, e, _)| e - s).sum();
    let mut theta = vec![0.0; d];
    theta[0] = (n_events as f64 / exposure).ln();
    let mut ll = objective.value(&theta);

    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (g, h) = objective.grad_hess(&theta);
        let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if grad_norm <= opts.grad_tol {
            break;
        }
        iterations += 1;

        // Newton direction (H is the Hessian of a concave-ish objective;
        // fall back to steepest ascent if the solve fails or doesn't ascend).
        let neg_g: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut dir = solve_linear(&h, &neg_g, d).unwrap_or_else(|| g.clone());
        if dir.iter().zip(&g).map(|(s, gi)| s * gi).sum::<f64>() <= 0.0 {
            dir = g.clone();
        }
        // Trust cap keeps log-scale parameters from exploding.
        let max_step = dir.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        if max_step > 2.0 {
            for x in dir.iter_mut() {
                *x *= 2.0 / max_step;
            }
        }

        // Near the optimum the objective changes below float precision while
        // the score is still shrinking; accept small full Newton steps
        // unconditionally (quadratic zone), line-search otherwise.
        let step_size = dir.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        if step_size < 1e-3 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, s)| t + s).collect();
            let cand_ll = objective.value(&cand);
            if cand_ll.is_finite() {
                theta = cand;
                ll = cand_ll;
                continue;
            }
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, s)| t + step * s).collect();
            let cand_ll = objective.value(&cand);
            if cand_ll.is_finite() && cand_ll > ll {
                theta = cand;
                ll = cand_ll;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            // Line search exhausted; the score check below decides.
            break;
        }
    }

    let (g, _) = objective.grad_hess(&theta);
    let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if grad_norm > opts.grad_tol.max(1e-6) {
        return Err(Error::FitNonConvergence { mark, grad_norm, iters: iterations });
    }

    let (eta, nu, beta_at) = objective.unpack(&theta);
    let mut model = IntensityModel::new(eta, nu);
    for (label, value) in data.labels.iter().zip(&theta[beta_at..]) {
        match *label {
            "a0" => model.beta_a0 = *value,
            "l0" => model.beta_l0 = *value,
            "n_z" => model.beta_z = *value,
            "n_ell" => model.beta_ell = *value,
            _ => unreachable!(),
        }
    }
    Ok(IntensityFit {
        mark,
        model,
        events: n_events,
        log_likelihood: ll,
        grad_norm,
        iterations,
        zero_events: false,
    })
}

/// Propensity estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropensityKind {
    Constant,
    LogisticInL0,
}

/// Fit P(A0=1 | L0) from the cohort; errors on single-arm data. Cohorts
/// without a treatment variable get the trivial no-arm fit.
pub fn fit_propensity(paths: &[Path], kind: PropensityKind) -> Result<PropensityFit> {
    let with_arm: Vec<&Path> = paths.iter().filter(|p| p.a0.is_some()).collect();
    if with_arm.is_empty() {
        return Ok(PropensityFit::NoArm);
    }
    if with_arm.len() != paths.len() {
        return Err(Error::Propensity("mixed cohort: some subjects lack a treatment arm".into()));
    }
    let n1 = with_arm.iter().filter(|p| p.a0 == Some(true)).count();
    if n1 == 0 || n1 == with_arm.len() {
        return Err(Error::Propensity("single-arm cohort: both arms are required".into()));
    }
    match kind {
        PropensityKind::Constant => Ok(PropensityFit::Model(Propensity::Constant {
            value: n1 as f64 / with_arm.len() as f64,
        })),
        PropensityKind::LogisticInL0 => {
            // Newton on the logistic log-likelihood (intercept, slope).
            let mut b = [0.0f64; 2];
            for _ in 0..100 {
                let mut g = [0.0f64; 2];
                let mut h = [0.0f64; 4];
                for p in &with_arm {
                    let x = [1.0, p.l0];
                    let eta = b[0] * x[0] + b[1] * x[1];
                    let mu = 1.0 / (1.0 + (-eta).exp());
                    let y = (p.a0 == Some(true)) as u8 as f64;
                    for r in 0..2 {
                        g[r] += (y - mu) * x[r];
                        for q in 0..2 {
                            h[r * 2 + q] -= mu * (1.0 - mu) * x[r] * x[q];
                        }
                    }
                }
                let delta = solve_linear(&h, &[-g[0], -g[1]], 2)
                    .ok_or_else(|| Error::Propensity("singular logistic Hessian".into()))?;
                b[0] += delta[0];
                b[1] += delta[1];
                if g[0].abs().max(g[1].abs()) < 1e-10 {
                    break;
                }
            }
            Ok(PropensityFit::Model(Propensity::Logistic { intercept: b[0], slope: b[1] }))
        }
    }
}

/// Fit every nuisance component of a cohort: all mark intensities (with
/// per-mark covariate restrictions for misspecification experiments) and the
/// propensity.
pub fn fit_all(
    paths: &[Path],
    j: u8,
    misspec: &BTreeMap<Mark, CovariateSpec>,
    propensity_kind: PropensityKind,
) -> Result<NuisanceSet> {
    let mut models = BTreeMap::new();
    let mut fits = Vec::new();
    for mark in Mark::all(j) {
        let covariates = misspec.get(&mark).copied().unwrap_or_default();
        let fit = fit_intensity(paths, mark, &FitOptions { covariates, ..Default::default() })?;
        models.insert(mark, fit.model);
        fits.push(fit);
    }
    let propensity = fit_propensity(paths, propensity_kind)?;
    Ok(NuisanceSet { models, propensity, fits, misspec: misspec.clone() })
}
