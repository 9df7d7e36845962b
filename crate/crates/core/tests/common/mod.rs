//! Test-only oracle: forward Kolmogorov integration of the single-outcome
//! Markov chain by RK4 on a fine grid, independent of the production
//! backward-recursion and simulation code paths.
//!
//! State layout (J = 1): transient `(n_ell, n_z)` at indices 0..4
//! (`n_ell*2 + n_z`), dead-from-state at 4..8, censored-from-state at 8..12.

#![allow(dead_code)]

use alphacal::model::{
    IntensityModel, InterventionSpec, Mark, Propensity, State, ValidatedScenario,
};
use std::collections::BTreeMap;

pub const DEAD: usize = 4;
pub const CENSORED: usize = 8;

fn rate(m: &IntensityModel, t: f64, state: State, a0: f64, l0: f64) -> f64 {
    if m.eta == 0.0 || t <= 0.0 {
        0.0
    } else {
        m.eta * m.nu * t.powf(m.nu - 1.0) * m.multiplier(state, a0, l0)
    }
}

/// Occupancy probabilities at tau for one (a0, l0), starting from state 00.
/// `scale(mark)` multiplies the mark's intensity (1 everywhere = observed law;
/// an intervention zeroes censoring and scales z).
pub fn forward_occupancy(
    models: &BTreeMap<Mark, IntensityModel>,
    scale: &dyn Fn(Mark) -> f64,
    tau: f64,
    steps: usize,
    a0: f64,
    l0: f64,
) -> [f64; 12] {
    let outcome = &models[&Mark::Outcome(1)];
    let ell = &models[&Mark::Ell];
    let z = &models[&Mark::Z];
    let censor = &models[&Mark::Censor];

    let deriv = |t: f64, p: &[f64; 12]| -> [f64; 12] {
        let mut d = [0.0; 12];
        for s in 0..4usize {
            let state = State { n_ell: s / 2 == 1, n_z: s % 2 == 1 };
            let mass = p[s];
            if mass == 0.0 {
                continue;
            }
            let mut outflow = 0.0;
            if !state.n_ell {
                let r = scale(Mark::Ell) * rate(ell, t, state, a0, l0);
                d[s + 2] += mass * r;
                outflow += r;
            }
            if !state.n_z {
                let r = scale(Mark::Z) * rate(z, t, state, a0, l0);
                d[s + 1] += mass * r;
                outflow += r;
            }
            let r = scale(Mark::Outcome(1)) * rate(outcome, t, state, a0, l0);
            d[DEAD + s] += mass * r;
            outflow += r;
            let r = scale(Mark::Censor) * rate(censor, t, state, a0, l0);
            d[CENSORED + s] += mass * r;
            outflow += r;
            d[s] -= mass * outflow;
        }
        d
    };

    let mut p = [0.0; 12];
    p[0] = 1.0;
    let h = tau / steps as f64;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = deriv(t, &p);
        let mut p2 = p;
        add_scaled(&mut p2, &k1, h / 2.0);
        let k2 = deriv(t + h / 2.0, &p2);
        let mut p3 = p;
        add_scaled(&mut p3, &k2, h / 2.0);
        let k3 = deriv(t + h / 2.0, &p3);
        let mut p4 = p;
        add_scaled(&mut p4, &k3, h);
        let k4 = deriv(t + h, &p4);
        for i in 0..12 {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    p
}

fn add_scaled(target: &mut [f64; 12], source: &[f64; 12], factor: f64) {
    for i in 0..12 {
        target[i] += factor * source[i];
    }
}

/// Readouts from an occupancy vector.
pub fn read_psi1(p: &[f64; 12]) -> f64 {
    (0..4).map(|s| p[DEAD + s]).sum()
}

pub fn read_psi_z(p: &[f64; 12]) -> f64 {
    [1usize, 3].iter().map(|&s| p[s] + p[DEAD + s] + p[CENSORED + s]).sum()
}

pub fn read_incidence(p: &[f64; 12], mark: Mark) -> f64 {
    match mark {
        Mark::Outcome(1) => read_psi1(p),
        Mark::Z => read_psi_z(p),
        Mark::Ell => [2usize, 3].iter().map(|&s| p[s] + p[DEAD + s] + p[CENSORED + s]).sum(),
        Mark::Censor => (0..4).map(|s| p[CENSORED + s]).sum(),
        _ => panic!("single-outcome oracle"),
    }
}

/// Gauss-Legendre nodes and weights on (0, 1).
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Newton from the Chebyshev initial guess on [-1, 1].
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// How to average over the baseline arm in oracle evaluations.
pub enum OracleArm<'a> {
    Forced(bool),
    Natural(&'a Propensity),
    NoArm,
}

/// Intervention-specific mean of N^x(tau), integrating L0 ~ Unif(0,1) by
/// Gauss-Legendre (or the scenario's empirical atoms).
pub fn oracle_psi(
    scenario: &ValidatedScenario,
    intervention: &InterventionSpec,
    x: Mark,
    steps: usize,
) -> f64 {
    let arm = match intervention.arm {
        Some(a) => OracleArm::Forced(a),
        None => match scenario.propensity() {
            Some(p) => OracleArm::Natural(p),
            None => OracleArm::NoArm,
        },
    };
    let scale = |m: Mark| intervention.scale(m);
    let nodes: Vec<(f64, f64)> = match scenario.l0() {
        alphacal::model::L0Dist::Uniform01 => gauss_legendre_unit(32),
        alphacal::model::L0Dist::Empirical { values } => {
            let w = 1.0 / values.len() as f64;
            values.iter().map(|&v| (v, w)).collect()
        }
    };
    let mut total = 0.0;
    for &(l0, w) in &nodes {
        let at = |a0: f64| -> f64 {
            let p = forward_occupancy(scenario.models(), &scale, scenario.tau(), steps, a0, l0);
            read_incidence(&p, x)
        };
        let value = match &arm {
            OracleArm::Forced(a) => at(*a as u8 as f64),
            OracleArm::NoArm => at(0.0),
            OracleArm::Natural(p) => {
                let p1 = p.prob1(l0);
                p1 * at(1.0) + (1.0 - p1) * at(0.0)
            }
        };
        total += w * value;
    }
    total
}

/// Observed-law cumulative incidence of a mark (no intervention).
pub fn oracle_observed_incidence(scenario: &ValidatedScenario, mark: Mark, steps: usize) -> f64 {
    let scale = |_: Mark| 1.0;
    let nodes = gauss_legendre_unit(32);
    let mut total = 0.0;
    for &(l0, w) in &nodes {
        let at = |a0: f64| -> f64 {
            let p = forward_occupancy(scenario.models(), &scale, scenario.tau(), steps, a0, l0);
            read_incidence(&p, mark)
        };
        let value = match scenario.propensity() {
            Some(p) => {
                let p1 = p.prob1(l0);
                p1 * at(1.0) + (1.0 - p1) * at(0.0)
            }
            None => at(0.0),
        };
        total += w * value;
    }
    total
}
