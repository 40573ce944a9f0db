//! Dual-signal uncertainty estimation.
//!
//! Combines a model-internal confidence (normalized logit magnitude) with a
//! data-level confidence (attribution-weighted average of per-field frequency
//! scores) into a per-instance uncertainty `u`, then maps `u` to the number
//! of exploration paths the instance receives.

use crate::error::{Error, Result};

/// Uncertainty components for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub s_model: f64,
    pub s_freq: f64,
    pub u: f64,
    pub k: usize,
}

/// `min(|logit| / gamma, 1)`: 0 at the decision boundary, 1 when the logit
/// reaches the calibration normalizer.
pub fn model_confidence(logit: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok((logit.abs() / gamma).min(1.0))
}

/// Attribution-weighted average of per-field frequency scores over present
/// fields. When every attribution is zero the weighted form is 0/0; the
/// unweighted mean over present fields is returned instead.
pub fn freq_confidence(attr: &[f64], freqs: &[f64], present: &[bool]) -> Result<f64> {
    if attr.len() != freqs.len() || attr.len() != present.len() {
        return Err(Error::Data(format!(
            "misaligned inputs: attr {}, freqs {}, present {}",
            attr.len(),
            freqs.len(),
            present.len()
        )));
    }
    let mut weight_sum = 0.0;
    let mut weighted = 0.0;
    let mut plain = 0.0;
    let mut count = 0usize;
    for i in 0..attr.len() {
        if present[i] {
            weight_sum += attr[i];
            weighted += attr[i] * freqs[i];
            plain += freqs[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no present fields".into()));
    }
    if weight_sum > 0.0 {
        Ok(weighted / weight_sum)
    } else {
        Ok(plain / count as f64)
    }
}

/// `u = 1 - [alpha * s_model + (1 - alpha) * s_freq]`, clamped against
/// floating-point dust only; in-range inputs already guarantee `[0, 1]`.
pub fn uncertainty(s_model: f64, s_freq: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("s_model", s_model), ("s_freq", s_freq), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let u = 1.0 - (alpha * s_model + (1.0 - alpha) * s_freq);
    Ok(u.clamp(0.0, 1.0))
}

/// `K = floor(k_max * u)`. Reaches `k_max` only at `u = 1` exactly.
pub fn path_budget(u: f64, k_max: usize) -> usize {
    debug_assert!((0.0..=1.0).contains(&u));
    ((k_max as f64 * u).floor() as usize).min(k_max)
}
