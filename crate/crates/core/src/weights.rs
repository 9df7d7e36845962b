//! Clever weights entering the influence curve and the targeting loss:
//! the treatment/censoring factor `δ_a(A) / (π(A|L) exp(-Λ̂^c(t-)))` and the
//! z-scaling likelihood ratio `α^{N^z(t-)} exp(-(α-1) Λ̂^z(t))`.
//!
//! Both are evaluated from closed-form Weibull cumulative hazards along a
//! path's frozen states; no quadrature is involved. At α=0 the z-ratio
//! reduces to `(1-N^z(t-)) exp(Λ̂^z(t))`, and at α=1 it is identically 1.

use crate::error::{Error, Result};
use crate::model::{admissible, IntensityModel, Mark, Path, Segment};

/// Piecewise closed-form cumulative hazard of one mark along one path's
/// frozen states, stopping at the end of observation.
#[derive(Debug, Clone)]
pub struct HazardTrace {
    nu: f64,
    /// Per segment: (start, end, eta*multiplier) where the mark is admissible.
    pieces: Vec<(f64, f64, f64)>,
    /// Cumulative hazard at each piece's start.
    offsets: Vec<f64>,
}

impl HazardTrace {
    /// Build the trace of `model` for `mark` along `path`.
    pub fn new(model: &IntensityModel, mark: Mark, path: &Path) -> Self {
        let a0 = path.a0_value();
        let mut pieces = Vec::new();
        let mut offsets = Vec::new();
        let mut acc = 0.0;
        for seg in path.segments() {
            if !admissible(mark, seg.state) || model.eta == 0.0 {
                continue;
            }
            let coeff = model.eta * model.multiplier(seg.state, a0, path.l0);
            offsets.push(acc);
            pieces.push((seg.start, seg.end, coeff));
            acc += coeff * (seg.end.powf(model.nu) - seg.start.powf(model.nu));
        }
        HazardTrace { nu: model.nu, pieces, offsets }
    }

    /// Λ(t) = ∫_0^t λ ds along the path (frozen states, admissibility and
    /// end of observation respected).
    pub fn cumulative(&self, t: f64) -> f64 {
        let mut total = 0.0;
        for (i, &(start, end, coeff)) in self.pieces.iter().enumerate() {
            if t <= start {
                break;
            }
            let upper = t.min(end);
            total = self.offsets[i] + coeff * (upper.powf(self.nu) - start.powf(self.nu));
        }
        total
    }

    /// Instantaneous hazard at `t` (0 outside admissible pieces).
    pub fn hazard(&self, t: f64) -> f64 {
        for &(start, end, coeff) in &self.pieces {
            if t >= start && t < end {
                return coeff * self.nu * t.powf(self.nu - 1.0);
            }
        }
        0.0
    }
}

/// Precomputed clever-weight evaluator for one path: the censoring/treatment
/// factor w^a_t and the z-ratio w^α_t.
#[derive(Debug, Clone)]
pub struct WeightTrace {
    censor: HazardTrace,
    z: HazardTrace,
    /// 1/π̂(a|L0) when the arm matches (or 1 with no arm intervention);
    /// None encodes an arm mismatch (weight 0).
    inv_pi: Option<f64>,
    /// Time of the path's z jump, if any.
    z_time: Option<f64>,
    alpha: f64,
}

impl WeightTrace {
    /// `pi_of_own_arm`: π̂(A_i | L_i) under the fitted assignment model, or
    /// `None` for interventions that leave the arm alone.
    pub fn new(
        censor_model: &IntensityModel,
        z_model: &IntensityModel,
        path: &Path,
        arm: Option<bool>,
        pi_of_own_arm: Option<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let inv_pi = match arm {
            None => Some(1.0),
            Some(a) => {
                if path.a0 != Some(a) {
                    None
                } else {
                    let pi = pi_of_own_arm.ok_or(Error::Positivity)?;
                    if !(pi > 0.0) {
                        return Err(Error::Positivity);
                    }
                    Some(1.0 / pi)
                }
            }
        };
        Ok(WeightTrace {
            censor: HazardTrace::new(censor_model, Mark::Censor, path),
            z: HazardTrace::new(z_model, Mark::Z, path),
            inv_pi,
            z_time: path.jumps.iter().find(|j| j.mark == Mark::Z).map(|j| j.time),
            alpha,
        })
    }

    /// w^a_t: arm indicator over propensity, times inverse censoring survival.
    pub fn w_arm_censor(&self, t: f64) -> f64 {
        match self.inv_pi {
            None => 0.0,
            Some(inv_pi) => inv_pi * self.censor.cumulative(t).exp(),
        }
    }

    /// w^α_t = α^{N^z(t-)} exp(-(α-1) Λ̂^z(t)); at α=0 this is
    /// (1-N^z(t-)) exp(Λ̂^z(t)).
    pub fn w_alpha(&self, t: f64) -> f64 {
        if self.alpha == 1.0 {
            return 1.0;
        }
        let n_z = matches!(self.z_time, Some(tz) if tz < t) as i32;
        self.alpha.powi(n_z) * (-(self.alpha - 1.0) * self.z.cumulative(t)).exp()
    }

    /// Product weight w^{a,α}_t.
    pub fn product(&self, t: f64) -> f64 {
        match self.inv_pi {
            None => 0.0,
            Some(_) => self.w_arm_censor(t) * self.w_alpha(t),
        }
    }

    /// Largest product weight over the path's jump times and segment ends
    /// (the weight is monotone within segments, so extremes sit at ends).
    pub fn max_product(&self, segments: &[Segment]) -> f64 {
        let mut max = 0.0f64;
        for seg in segments {
            max = max.max(self.product(seg.start)).max(self.product(seg.end));
        }
        max
    }
}

/// Spec-level convenience: w^a_t for one path at one time.
pub fn treatment_censoring_weight(
    pi_of_own_arm: Option<f64>,
    censor_model: &IntensityModel,
    path: &Path,
    t: f64,
    arm: Option<bool>,
) -> Result<f64> {
    let zero = IntensityModel::new(0.0, 1.0);
    let trace = WeightTrace::new(censor_model, &zero, path, arm, pi_of_own_arm, 1.0)?;
    Ok(trace.w_arm_censor(t))
}

/// Spec-level convenience: w^α_t for one path at one time, from the observed
/// (un-intervened) z-model.
pub fn alpha_weight(z_model: &IntensityModel, path: &Path, t: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Intervention(format!("alpha must be >= 0, got {alpha}")));
    }
    let zero = IntensityModel::new(0.0, 1.0);
    let trace = WeightTrace::new(&zero, z_model, path, None, None, alpha)?;
    Ok(trace.w_alpha(t))
}
