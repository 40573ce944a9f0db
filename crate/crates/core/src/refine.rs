//! Adaptive feature filtering (stage 1).
//!
//! Each present feature gets a composite score `w = beta * freq + (1 - beta)
//! * attr_norm` mixing its normalized frequency with its per-instance
//! max-normalized attribution. Features scoring below their field's
//! calibrated threshold are dropped, and a forward pass on the survivors
//! yields the refined prediction. Attributions are max-normalized into
//! `[0, 1]` before mixing so both terms live on the same scale; the same
//! normalization is applied during threshold calibration.

use crate::calib::CalibrationProfile;
use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::model::{sigmoid, AttributionVector, Backbone};

/// Composite per-field scores for one instance. `w` is `NaN` for masked
/// fields; consumers must consult the presence mask first.
#[derive(Debug, Clone)]
pub struct CompositeScores {
    pub w: Vec<f64>,
    pub attr_norm: Vec<f64>,
}

/// Refined feature set and its prediction.
#[derive(Debug, Clone)]
pub struct RefinedInstance {
    pub kept: Vec<bool>,
    pub refined_logit: f64,
    pub refined_prob: f64,
}

/// Max-normalizes attributions over present fields, then mixes with the
/// frequency scores. All-zero attributions normalize to all zeros.
pub fn composite_scores(
    attr: &AttributionVector,
    freqs: &[f64],
    present: &[bool],
    beta: f64,
) -> Result<CompositeScores> {
    let n = attr.attr.len();
    if freqs.len() != n || present.len() != n {
        return Err(Error::Data(format!(
            "misaligned inputs: attr {n}, freqs {}, present {}",
            freqs.len(),
            present.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta = {beta} outside [0, 1]")));
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::Data("no present fields".into()));
    }
    let max = present
        .iter()
        .zip(&attr.attr)
        .filter(|(p, _)| **p)
        .map(|(_, a)| *a)
        .fold(0.0f64, f64::max);
    let attr_norm: Vec<f64> = (0..n)
        .map(|i| {
            if present[i] && max > 0.0 {
                attr.attr[i] / max
            } else {
                0.0
            }
        })
        .collect();
    let w = (0..n)
        .map(|i| {
            if present[i] {
                beta * freqs[i] + (1.0 - beta) * attr_norm[i]
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(CompositeScores { w, attr_norm })
}

/// Keeps present fields with `w >= tau`. If that would drop everything, the
/// single highest-scoring present field is kept instead (ties broken toward
/// the lowest index) and the safeguard flag is returned.
pub fn filter(
    x: &FeatureVector,
    scores: &CompositeScores,
    profile: &CalibrationProfile,
) -> (Vec<bool>, bool) {
    let n = x.num_fields();
    debug_assert_eq!(scores.w.len(), n);
    debug_assert_eq!(profile.field_thresholds.len(), n);
    let mut kept = vec![false; n];
    let mut any_kept = false;
    let mut best: Option<usize> = None;
    for i in 0..n {
        if x.fields[i].is_none() {
            continue;
        }
        if scores.w[i] >= profile.field_thresholds[i] {
            kept[i] = true;
            any_kept = true;
        }
        match best {
            Some(b) if scores.w[i] <= scores.w[b] => {}
            _ => best = Some(i),
        }
    }
    if any_kept {
        return (kept, false);
    }
    match best {
        Some(b) => {
            kept[b] = true;
            (kept, true)
        }
        None => (kept, false), // no present fields at all; caller errors earlier
    }
}

/// Forward pass with non-kept fields masked.
pub fn refined_prediction(
    model: &Backbone,
    x: &FeatureVector,
    kept: &[bool],
) -> Result<RefinedInstance> {
    debug_assert!(kept.iter().any(|&k| k));
    let refined_logit = model.forward_masked(x, Some(kept))?;
    Ok(RefinedInstance {
        kept: kept.to_vec(),
        refined_logit,
        refined_prob: sigmoid(refined_logit),
    })
}
