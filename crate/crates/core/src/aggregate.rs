//! Consistency-weighted aggregation of path predictions.
//!
//! Every prediction is weighted by `exp(-lambda * |P_i - mean|)`, so paths
//! far from the ensemble mean (typically ones that masked a critical
//! feature) are down-weighted, and the final score is the weighted average.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AggregationResult {
    pub mean_prediction: f64,
    /// One weight per input prediction, all in `(0, 1]`.
    pub weights: Vec<f64>,
    pub final_prediction: f64,
    pub lambda_used: f64,
}

/// Floor keeping the weight denominator positive under extreme `lambda`.
const WEIGHT_FLOOR: f64 = 1e-300;

pub fn aggregate(predictions: &[f64], lambda: f64) -> Result<AggregationResult> {
    if predictions.is_empty() {
        return Err(Error::Data("aggregate over an empty prediction set".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    for &p in predictions {
        if !p.is_finite() {
            return Err(Error::Data(format!("non-finite prediction {p}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Data(format!("prediction {p} outside (0, 1)")));
        }
    }
    let n = predictions.len() as f64;
    let mean: f64 = predictions.iter().sum::<f64>() / n;
    let weights: Vec<f64> = predictions
        .iter()
        .map(|p| (-(lambda * (p - mean).abs())).exp().max(WEIGHT_FLOOR))
        .collect();
    let denom: f64 = weights.iter().sum();
    let numer: f64 = weights.iter().zip(predictions).map(|(w, p)| w * p).sum();
    Ok(AggregationResult {
        mean_prediction: mean,
        weights,
        final_prediction: numer / denom,
        lambda_used: lambda,
    })
}
