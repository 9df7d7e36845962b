//! Backward-Kolmogorov solver on the finite state space of the two binary
//! processes plus absorbing outcome states.
//!
//! For a fixed baseline (a0, l0) and an intervention (arm forced, censoring
//! removed, z-rate scaled by alpha), the process is a Markov jump process on
//! `{(n_ell, n_z)} ∪ {dead(j, n_z)}`. This module solves the backward
//! equation for the conditional expectations
//! `g_x(t, state) = E[N^x(tau) | state at t]`, `x ∈ {outcome 1, z}`, by
//! stepping `g(t_k) = exp(∫_step Q(s) ds) g(t_{k+1})` backward on a uniform
//! grid. The per-entry integrals of the generator are exact Weibull
//! cumulative hazards, so the step propagator is a true matrix exponential of
//! the step-averaged generator (second order in the step size, exact for
//! constant rates).
//!
//! The solved tables supply the jump-conditional contrasts entering the
//! efficient influence curve and the g-computation plug-in value.

use crate::error::{Error, Result};
use crate::model::{admissible, IntensityModel, InterventionSpec, Mark, Propensity, State};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Default grid size for backward solves.
pub const DEFAULT_GRID: usize = 2000;

/// Target process for value functions and estimands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetEvent {
    /// The outcome of interest N^1.
    Outcome1,
    /// The intermediate process N^z.
    Z,
}

impl TargetEvent {
    pub fn as_mark(self) -> Mark {
        match self {
            TargetEvent::Outcome1 => Mark::Outcome(1),
            TargetEvent::Z => Mark::Z,
        }
    }
}

/// Backward-recursion solution g_x(t, state) on a uniform grid over [0, tau],
/// for both targets, at one (a0, l0, alpha).
#[derive(Debug, Clone)]
pub struct ValueTable {
    tau: f64,
    dt: f64,
    alpha: f64,
    /// g for x = outcome 1, indexed [grid point][transient state].
    g1: Vec<[f64; 4]>,
    /// g for x = z.
    gz: Vec<[f64; 4]>,
}

struct Chain<'a> {
    outcomes: Vec<&'a IntensityModel>,
    ell: &'a IntensityModel,
    z: &'a IntensityModel,
    alpha: f64,
    a0: f64,
    l0: f64,
}

impl<'a> Chain<'a> {
    fn new(
        models: &'a BTreeMap<Mark, IntensityModel>,
        j: u8,
        intervention: &InterventionSpec,
        a0: f64,
        l0: f64,
    ) -> Result<Self> {
        let mut outcomes = Vec::with_capacity(j as usize);
        for cause in 1..=j {
            outcomes.push(
                models
                    .get(&Mark::Outcome(cause))
                    .ok_or_else(|| Error::Scenario(format!("missing model for mark {cause}")))?,
            );
        }
        let ell =
            models.get(&Mark::Ell).ok_or_else(|| Error::Scenario("missing ell model".into()))?;
        let z = models.get(&Mark::Z).ok_or_else(|| Error::Scenario("missing z model".into()))?;
        Ok(Chain { outcomes, ell, z, alpha: intervention.alpha, a0, l0 })
    }

    fn dim(&self) -> usize {
        4 + 2 * self.outcomes.len()
    }

    fn dead_index(&self, cause: usize, n_z: bool) -> usize {
        4 + 2 * cause + (n_z as usize)
    }

    /// Terminal value vectors at tau: [g1 | gz] per state.
    fn terminal(&self) -> Vec<[f64; 2]> {
        let mut v = vec![[0.0, 0.0]; self.dim()];
        for s in 0..4 {
            let n_z = s % 2 == 1;
            v[s] = [0.0, n_z as u8 as f64];
        }
        for cause in 0..self.outcomes.len() {
            for n_z in [false, true] {
                let g1 = (cause == 0) as u8 as f64;
                v[self.dead_index(cause, n_z)] = [g1, n_z as u8 as f64];
            }
        }
        v
    }

    /// A = ∫_[t0,t1] Q(s) ds, using powers `pw0`, `pw1` of the step endpoints
    /// (t^nu per mark) and precomputed per-state multipliers.
    fn step_integral(&self, coeffs: &StateCoeffs, pw0: &MarkPowers, pw1: &MarkPowers, a: &mut [f64]) {
        let d = self.dim();
        a.fill(0.0);
        for s in 0..4 {
            let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
            let row = &mut a[s * d..(s + 1) * d];
            let mut total = 0.0;
            if !state.n_ell {
                let lam = coeffs.ell[s] * (pw1.ell - pw0.ell);
                row[State { n_ell: true, ..state }.index()] += lam;
                total += lam;
            }
            if !state.n_z {
                let lam = self.alpha * coeffs.z[s] * (pw1.z - pw0.z);
                row[State { n_z: true, ..state }.index()] += lam;
                total += lam;
            }
            for cause in 0..self.outcomes.len() {
                let lam = coeffs.outcomes[cause][s] * (pw1.outcomes[cause] - pw0.outcomes[cause]);
                row[self.dead_index(cause, state.n_z)] += lam;
                total += lam;
            }
            row[s] -= total;
        }
    }
}

struct StateCoeffs {
    ell: [f64; 4],
    z: [f64; 4],
    outcomes: Vec<[f64; 4]>,
}

struct MarkPowers {
    ell: f64,
    z: f64,
    outcomes: Vec<f64>,
}

fn state_coeffs(chain: &Chain) -> StateCoeffs {
    let per_state = |m: &IntensityModel| -> [f64; 4] {
        let mut c = [0.0; 4];
        for (s, slot) in c.iter_mut().enumerate() {
            let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
            *slot = m.eta * m.multiplier(state, chain.a0, chain.l0);
        }
        c
    };
    StateCoeffs {
        ell: per_state(chain.ell),
        z: per_state(chain.z),
        outcomes: chain.outcomes.iter().map(|m| per_state(m)).collect(),
    }
}

fn mark_powers(chain: &Chain, t: f64) -> MarkPowers {
    MarkPowers {
        ell: t.powf(chain.ell.nu),
        z: t.powf(chain.z.nu),
        outcomes: chain.outcomes.iter().map(|m| t.powf(m.nu)).collect(),
    }
}

/// v <- exp(A) v for a generator-integral matrix `a` (row-major, d x d) acting
/// on a d x 2 value matrix. Truncated series; scaling and squaring when the
/// norm is large.
fn exp_apply(a: &[f64], d: usize, v: &mut [[f64; 2]]) {
    let norm = (0..d)
        .map(|i| a[i * d..(i + 1) * d].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if norm <= 0.5 {
        series_apply(a, d, v);
        return;
    }
    let squarings = (norm / 0.5).log2().ceil() as u32;
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
    let mut exp = vec![0.0; d * d];
    for i in 0..d {
        exp[i * d + i] = 1.0;
    }
    let mut term = exp.clone();
    for k in 1..=30 {
        term = mat_mul(&term, &scaled, d);
        for x in term.iter_mut() {
            *x /= k as f64;
        }
        let mut max = 0.0f64;
        for (e, t) in exp.iter_mut().zip(&term) {
            *e += t;
            max = max.max(t.abs());
        }
        if max < 1e-16 {
            break;
        }
    }
    for _ in 0..squarings {
        exp = mat_mul(&exp, &exp, d);
    }
    let old = v.to_vec();
    for i in 0..d {
        let row = &exp[i * d..(i + 1) * d];
        let mut acc = [0.0; 2];
        for (j, o) in old.iter().enumerate() {
            acc[0] += row[j] * o[0];
            acc[1] += row[j] * o[1];
        }
        v[i] = acc;
    }
}

fn series_apply(a: &[f64], d: usize, v: &mut [[f64; 2]]) {
    let mut w: Vec<[f64; 2]> = v.to_vec();
    let mut next = vec![[0.0f64; 2]; d];
    for k in 1..=30u32 {
        for i in 0..d {
            let row = &a[i * d..(i + 1) * d];
            let mut acc = [0.0f64; 2];
            for (j, wj) in w.iter().enumerate() {
                let aij = row[j];
                if aij != 0.0 {
                    acc[0] += aij * wj[0];
                    acc[1] += aij * wj[1];
                }
            }
            next[i] = [acc[0] / k as f64, acc[1] / k as f64];
        }
        let mut max = 0.0f64;
        for i in 0..d {
            v[i][0] += next[i][0];
            v[i][1] += next[i][1];
            max = max.max(next[i][0].abs()).max(next[i][1].abs());
        }
        if max < 1e-17 {
            break;
        }
        std::mem::swap(&mut w, &mut next);
    }
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Solve the backward equation on a uniform `m`-step grid for one (a0, l0).
///
/// `models` are the observed-law intensities; the intervention supplies the
/// z-scaling (censoring is structurally absent from the intervened chain).
pub fn backward_solve(
    models: &BTreeMap<Mark, IntensityModel>,
    j: u8,
    intervention: &InterventionSpec,
    tau: f64,
    m: usize,
    a0: f64,
    l0: f64,
) -> Result<ValueTable> {
    if m < 2 {
        return Err(Error::Invalid(format!("grid size must be at least 2, got {m}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("tau must be > 0, got {tau}")));
    }
    let chain = Chain::new(models, j, intervention, a0, l0)?;
    let d = chain.dim();
    let coeffs = state_coeffs(&chain);
    let dt = tau / m as f64;

    let mut v = chain.terminal();
    let mut g1 = vec![[0.0f64; 4]; m + 1];
    let mut gz = vec![[0.0f64; 4]; m + 1];
    store(&v, &mut g1[m], &mut gz[m]);

    let mut a = vec![0.0f64; d * d];
    let mut pw_hi = mark_powers(&chain, tau);
    // Probe a handful of steps for the local step error (one step vs two
    // half-steps) to catch grids too coarse for the hazards at hand.
    let probe_stride = (m / 8).max(1);
    let mut max_local_err = 0.0f64;

    for k in (0..m).rev() {
        let t_lo = k as f64 * dt;
        let pw_lo = mark_powers(&chain, t_lo);
        chain.step_integral(&coeffs, &pw_lo, &pw_hi, &mut a);

        if k % probe_stride == 0 {
            let pw_mid = mark_powers(&chain, t_lo + 0.5 * dt);
            let mut fine = v.clone();
            let mut half = vec![0.0f64; d * d];
            chain.step_integral(&coeffs, &pw_mid, &pw_hi, &mut half);
            exp_apply(&half, d, &mut fine);
            chain.step_integral(&coeffs, &pw_lo, &pw_mid, &mut half);
            exp_apply(&half, d, &mut fine);
            exp_apply(&a, d, &mut v);
            let local = v
                .iter()
                .zip(&fine)
                .map(|(x, y)| (x[0] - y[0]).abs().max((x[1] - y[1]).abs()))
                .fold(0.0f64, f64::max);
            max_local_err = max_local_err.max(local);
        } else {
            exp_apply(&a, d, &mut v);
        }

        for slot in v.iter_mut() {
            slot[0] = slot[0].clamp(0.0, 1.0);
            slot[1] = slot[1].clamp(0.0, 1.0);
        }
        store(&v, &mut g1[k], &mut gz[k]);
        pw_hi = pw_lo;
    }

    let estimate = max_local_err * m as f64;
    if estimate > 0.05 {
        return Err(Error::GridTooCoarse { estimate, tolerance: 0.05 });
    }

    Ok(ValueTable { tau, dt, alpha: intervention.alpha, g1, gz })
}

fn store(v: &[[f64; 2]], g1: &mut [f64; 4], gz: &mut [f64; 4]) {
    for s in 0..4 {
        g1[s] = v[s][0];
        gz[s] = v[s][1];
    }
}

impl ValueTable {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// g_x(t, state), linearly interpolated on the grid and clamped to [0,1].
    pub fn g(&self, x: TargetEvent, t: f64, state: State) -> f64 {
        let table = match x {
            TargetEvent::Outcome1 => &self.g1,
            TargetEvent::Z => &self.gz,
        };
        let s = state.index();
        if t <= 0.0 {
            return table[0][s];
        }
        if t >= self.tau {
            return table[table.len() - 1][s];
        }
        let pos = t / self.dt;
        let k = (pos.floor() as usize).min(table.len() - 2);
        let w = pos - k as f64;
        ((1.0 - w) * table[k][s] + w * table[k + 1][s]).clamp(0.0, 1.0)
    }

    /// Value immediately after a `jump` from `state` at time `t`: g at the
    /// post-jump transient state, or the frozen count for terminal jumps.
    pub fn post_jump_value(&self, x: TargetEvent, t: f64, state: State, jump: Mark) -> Result<f64> {
        if !admissible(jump, state) || jump == Mark::Censor {
            return Err(Error::InadmissibleJump { mark: jump, n_ell: state.n_ell, n_z: state.n_z });
        }
        Ok(match (jump, x) {
            (Mark::Outcome(cause), TargetEvent::Outcome1) => (cause == 1) as u8 as f64,
            (Mark::Outcome(_), TargetEvent::Z) => state.n_z as u8 as f64,
            (Mark::Ell | Mark::Z, _) => self.g(x, t, state.with_jump(jump)),
            (Mark::Censor, _) => unreachable!(),
        })
    }

    /// Jump-conditional contrast h^{x,jump}(t): post-jump value minus no-jump
    /// value; the z contrast carries the extra factor alpha.
    pub fn clever_covariate(&self, x: TargetEvent, t: f64, state: State, jump: Mark) -> Result<f64> {
        let h = self.post_jump_value(x, t, state, jump)? - self.g(x, t, state);
        Ok(if jump == Mark::Z { self.alpha * h } else { h })
    }
}

/// How the baseline treatment enters a g-computation average.
#[derive(Debug, Clone, Copy)]
pub enum ArmAverage<'a> {
    /// Arm forced by the intervention.
    Forced(bool),
    /// No arm intervention: average arms under the given assignment model.
    Natural(&'a Propensity),
    /// Scenario without a treatment variable.
    NoArm,
}

/// Substitution (g-computation) value: mean over `l0_sample` of
/// g_x(0, initial state). This is the plug-in estimate of the
/// intervention-specific mean of N^x(tau).
pub fn plugin_psi(
    models: &BTreeMap<Mark, IntensityModel>,
    j: u8,
    intervention: &InterventionSpec,
    x: TargetEvent,
    tau: f64,
    m: usize,
    l0_sample: &[f64],
    arm: ArmAverage,
) -> Result<f64> {
    if l0_sample.is_empty() {
        return Err(Error::Invalid("l0 sample must be nonempty".into()));
    }
    let values: Result<Vec<f64>> = l0_sample
        .par_iter()
        .map(|&l0| -> Result<f64> {
            let at = |a0: f64| -> Result<f64> {
                let table = backward_solve(models, j, intervention, tau, m, a0, l0)?;
                Ok(table.g(x, 0.0, State::default()))
            };
            match arm {
                ArmAverage::Forced(a) => at(a as u8 as f64),
                ArmAverage::NoArm => at(0.0),
                ArmAverage::Natural(p) => {
                    let p1 = p.prob1(l0);
                    Ok(p1 * at(1.0)? + (1.0 - p1) * at(0.0)?)
                }
            }
        })
        .collect();
    let values = values?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IntensityModel, InterventionSpec};

    fn models(
        outcome: IntensityModel,
        ell: IntensityModel,
        z: IntensityModel,
    ) -> BTreeMap<Mark, IntensityModel> {
        let mut m = BTreeMap::new();
        m.insert(Mark::Outcome(1), outcome);
        m.insert(Mark::Ell, ell);
        m.insert(Mark::Z, z);
        m.insert(Mark::Censor, IntensityModel::new(0.0, 1.0));
        m
    }

    fn zero() -> IntensityModel {
        IntensityModel::new(0.0, 1.0)
    }

    #[test]
    fn no_dynamics_gives_zero_values() {
        let m = models(zero(), zero(), zero());
        let itv = InterventionSpec::new(None, 1.0).unwrap();
        let table = backward_solve(&m, 1, &itv, 2.0, 50, 0.0, 0.0).unwrap();
        for s in 0..4 {
            let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
            assert_eq!(table.g(TargetEvent::Outcome1, 0.7, state), 0.0);
            // g_z stays at the current count
            assert_eq!(table.g(TargetEvent::Z, 0.7, state), (s % 2) as f64);
        }
    }

    #[test]
    fn constant_outcome_rate_closed_form() {
        let r = 0.8;
        let tau = 2.0;
        let m = models(IntensityModel::new(r, 1.0), zero(), zero());
        let itv = InterventionSpec::new(None, 1.0).unwrap();
        let table = backward_solve(&m, 1, &itv, tau, 200, 0.0, 0.0).unwrap();
        for t in [0.0, 0.5, 1.3, 2.0] {
            let got = table.g(TargetEvent::Outcome1, t, State::default());
            let want = 1.0 - (-r * (tau - t)).exp();
            assert!((got - want).abs() < 1e-10, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn terminal_conditions_exact() {
        let m = models(
            IntensityModel::new(0.3, 1.2),
            IntensityModel::new(0.2, 0.8),
            IntensityModel::new(0.5, 1.0),
        );
        let itv = InterventionSpec::new(None, 1.5).unwrap();
        let table = backward_solve(&m, 1, &itv, 3.0, 64, 1.0, 0.4).unwrap();
        for s in 0..4usize {
            let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
            assert_eq!(table.g(TargetEvent::Outcome1, 3.0, state), 0.0);
            assert_eq!(table.g(TargetEvent::Z, 3.0, state), (s % 2) as f64);
        }
    }

    #[test]
    fn z_value_frozen_after_z() {
        // once n_z = 1, g_z is identically 1
        let m = models(
            IntensityModel::new(0.4, 1.0),
            IntensityModel::new(0.3, 1.0),
            IntensityModel::new(0.6, 1.0),
        );
        let itv = InterventionSpec::new(None, 0.7).unwrap();
        let table = backward_solve(&m, 1, &itv, 3.0, 128, 0.0, 0.2).unwrap();
        for t in [0.0, 1.0, 2.9] {
            assert!((table.g(TargetEvent::Z, t, State::new(false, true)) - 1.0).abs() < 1e-12);
            assert!((table.g(TargetEvent::Z, t, State::new(true, true)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clever_covariate_forms() {
        let m = models(
            IntensityModel::new(0.4, 1.0),
            IntensityModel::new(0.3, 1.0),
            IntensityModel::new(0.6, 1.0),
        );
        let alpha = 0.5;
        let itv = InterventionSpec::new(None, alpha).unwrap();
        let table = backward_solve(&m, 1, &itv, 3.0, 256, 0.0, 0.2).unwrap();
        let s00 = State::default();
        let t = 1.1;

        // outcome jump: 1 - g_1
        let h = table.clever_covariate(TargetEvent::Outcome1, t, s00, Mark::Outcome(1)).unwrap();
        assert!((h - (1.0 - table.g(TargetEvent::Outcome1, t, s00))).abs() < 1e-14);

        // death jump with n_z = 1 contributes 1 - g_z = 0 for x = z
        let s01 = State::new(false, true);
        let h = table.clever_covariate(TargetEvent::Z, t, s01, Mark::Outcome(1)).unwrap();
        assert!(h.abs() < 1e-12);

        // z jump carries the alpha factor
        let h = table.clever_covariate(TargetEvent::Z, t, s00, Mark::Z).unwrap();
        let expect = alpha * (1.0 - table.g(TargetEvent::Z, t, s00));
        assert!((h - expect).abs() < 1e-12);

        // alpha = 0 makes the z contrast vanish
        let itv0 = InterventionSpec::new(None, 0.0).unwrap();
        let t0 = backward_solve(&m, 1, &itv0, 3.0, 64, 0.0, 0.2).unwrap();
        assert_eq!(t0.clever_covariate(TargetEvent::Outcome1, t, s00, Mark::Z).unwrap(), 0.0);

        // inadmissible jumps error
        assert!(table.clever_covariate(TargetEvent::Z, t, s01, Mark::Z).is_err());
        assert!(table.clever_covariate(TargetEvent::Z, t, s00, Mark::Censor).is_err());
    }

    #[test]
    fn grid_refinement_is_second_order() {
        // Non-commuting generator: ell changes the outcome hazard, shapes differ.
        let mut outcome = IntensityModel::new(0.5, 2.0);
        outcome.beta_ell = 1.0;
        let ell = IntensityModel::new(0.7, 1.0);
        let m = models(outcome, ell, zero());
        let itv = InterventionSpec::new(None, 1.0).unwrap();
        let solve = |steps: usize| -> f64 {
            backward_solve(&m, 1, &itv, 2.0, steps, 0.0, 0.0)
                .unwrap()
                .g(TargetEvent::Outcome1, 0.0, State::default())
        };
        let reference = solve(16384);
        let e1 = (solve(64) - reference).abs();
        let e2 = (solve(128) - reference).abs();
        let order = (e1 / e2).log2();
        assert!(order >= 1.8, "empirical order {order} (errors {e1:.3e}, {e2:.3e})");
    }

    #[test]
    fn coarse_grid_rejected_on_stiff_scenario() {
        // Needs genuinely time-varying, state-coupled rates: with constant
        // rates the step propagator is exact at any grid size.
        let mut outcome = IntensityModel::new(0.3, 3.0);
        outcome.beta_ell = -3.0;
        let ell = IntensityModel::new(1.2, 1.0);
        let m = models(outcome, ell, zero());
        let itv = InterventionSpec::new(None, 1.0).unwrap();
        let res = backward_solve(&m, 1, &itv, 3.0, 2, 0.0, 0.5);
        assert!(matches!(res, Err(Error::GridTooCoarse { .. })), "got {res:?}");
    }

    #[test]
    fn plugin_psi_degenerate_atom_and_alpha_zero() {
        let m = models(
            IntensityModel::new(0.4, 1.0),
            IntensityModel::new(0.3, 1.0),
            IntensityModel::new(0.6, 1.0),
        );
        let itv0 = InterventionSpec::new(None, 0.0).unwrap();
        let psi =
            plugin_psi(&m, 1, &itv0, TargetEvent::Z, 3.0, 64, &[0.3], ArmAverage::NoArm).unwrap();
        assert_eq!(psi, 0.0);

        let itv = InterventionSpec::new(None, 1.0).unwrap();
        let psi =
            plugin_psi(&m, 1, &itv, TargetEvent::Outcome1, 3.0, 128, &[0.3], ArmAverage::NoArm)
                .unwrap();
        let table = backward_solve(&m, 1, &itv, 3.0, 128, 0.0, 0.3).unwrap();
        assert_eq!(psi, table.g(TargetEvent::Outcome1, 0.0, State::default()));
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let scenario =
            crate::model::build_scenario(crate::model::ScenarioConfig::preset("example1").unwrap())
                .unwrap();
        let itv = InterventionSpec::new(None, 2.0).unwrap();
        let table = backward_solve(scenario.models(), 1, &itv, 3.0, 400, 0.0, 0.9).unwrap();
        for k in 0..=400 {
            let t = 3.0 * k as f64 / 400.0;
            for s in 0..4 {
                let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
                for x in [TargetEvent::Outcome1, TargetEvent::Z] {
                    let g = table.g(x, t, state);
                    assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }
}

