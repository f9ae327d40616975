//! KL estimators and the clipped drift term.
//!
//! All quantities are computed from log-probabilities; the ratio is always
//! `exp(logp_new − logp_old)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const DEFAULT_DRIFT_CAP: f64 = 2.0;

/// A token's log-probability under the sampling policy and under the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub logp_old: f64,
    pub logp_new: f64,
}

impl RatioSample {
    pub fn new(logp_old: f64, logp_new: f64) -> Result<Self> {
        if !logp_old.is_finite() || !logp_new.is_finite() {
            return Err(LabError::InvalidInput(format!(
                "non-finite log-probs: old {logp_old}, new {logp_new}"
            )));
        }
        Ok(Self { logp_old, logp_new })
    }

    pub fn log_ratio(&self) -> f64 {
        self.logp_new - self.logp_old
    }

    pub fn ratio(&self) -> f64 {
        self.log_ratio().exp()
    }
}

/// `ln(π_old / π_new)`.
pub fn k1_estimate(s: &RatioSample) -> f64 {
    s.logp_old - s.logp_new
}

/// `r − 1 − ln r`, evaluated as `expm1(d) − d` for accuracy near `r = 1`.
pub fn k3_estimate(s: &RatioSample) -> f64 {
    let d = s.log_ratio();
    (d.exp_m1() - d).max(0.0)
}

/// Coefficient of `∇ ln π_θ` in the gradient of the k1 estimator.
pub fn k1_grad_coefficient(_s: &RatioSample) -> f64 {
    -1.0
}

/// Coefficient of `∇ ln π_θ` in the gradient of the unclipped k3 estimator.
pub fn k3_grad_coefficient(s: &RatioSample) -> f64 {
    s.log_ratio().exp_m1()
}

/// Gradient coefficient obtained by clipping the ratio inside the k3 value at `1 + c`.
///
/// Once the cap binds the `r` term is constant and only `−ln r` remains, so
/// the gradient pushes the ratio further up. Kept for contrast with [`drift_term`].
pub fn estimator_clipped_k3_grad_coefficient(s: &RatioSample, c: f64) -> f64 {
    let rm1 = s.log_ratio().exp_m1();
    if rm1 > c {
        -1.0
    } else {
        rm1
    }
}

/// Drift value and gradient coefficient with the ratio held constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftTerm {
    pub value: f64,
    pub grad_coefficient: f64,
    pub c: f64,
}

/// `min(sg(r) − 1, c) · ln π_θ`; its gradient is `min(r − 1, c) · ∇ ln π_θ`.
pub fn drift_term(s: &RatioSample, c: f64) -> Result<DriftTerm> {
    if !(c > 0.0) {
        return Err(LabError::InvalidInput(format!(
            "drift cap c must be > 0, got {c}"
        )));
    }
    let coef = s.log_ratio().exp_m1().min(c);
    Ok(DriftTerm {
        value: coef * s.logp_new,
        grad_coefficient: coef,
        c,
    })
}

/// `Σ p ln(p / q)` by direct summation.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::Shape(format!(
            "{} vs {} outcomes",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(LabError::InvalidInput(format!(
                "invalid probability at outcome {i}"
            )));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(LabError::InvalidInput(format!(
                "support violation: p[{i}] = {pi} but q[{i}] = 0"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}
