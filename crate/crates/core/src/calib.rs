//! Offline calibration: the logit normalizer `gamma` and per-field filtering
//! thresholds `tau`.
//!
//! Both quantities are nearest-rank percentiles (the `ceil(q * n)`-th order
//! statistic of the sorted sample), computed by exact in-memory sorts.
//! `gamma` is the 95th percentile of `|logit|` on a validation stream; each
//! `tau_i` is the `rho`-quantile of field `i`'s composite-score distribution
//! over a calibration sample, using the same attribution normalization as
//! inference so scores and thresholds share a scale.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::hashing::Fnv64;
use crate::model::Backbone;
use crate::refine::composite_scores;
use crate::sketch::FrequencySketch;

pub const PROFILE_FORMAT_VERSION: u32 = 1;
const GAMMA_PERCENTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub gamma: f64,
    pub field_thresholds: Vec<f64>,
    pub rho: f64,
    pub eta: u64,
    pub sample_size: usize,
    /// ISO-8601 creation timestamp.
    pub created_at: String,
    /// Digest of (alpha, beta, rho, k_max, t_steps, lambda, eta); a mismatch
    /// against the engine config at inference time raises a drift flag.
    pub hyperparams_hash: u64,
}

/// Digest of the hyperparameter tuple, in canonical order.
pub fn hyperparams_digest(
    alpha: f64,
    beta: f64,
    rho: f64,
    k_max: usize,
    t_steps: usize,
    lambda: f64,
    eta: u64,
) -> u64 {
    let mut h = Fnv64::new();
    h.update(&alpha.to_le_bytes());
    h.update(&beta.to_le_bytes());
    h.update(&rho.to_le_bytes());
    h.update(&(k_max as u64).to_le_bytes());
    h.update(&(t_steps as u64).to_le_bytes());
    h.update(&lambda.to_le_bytes());
    h.update(&eta.to_le_bytes());
    h.finish()
}

/// Nearest-rank percentile: the `ceil(q * n)`-th order statistic (1-indexed)
/// of an ascending-sorted slice. The small epsilon guards against binary
/// dust in `q * n` flipping an exact integer rank upward.
pub fn nearest_rank(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Data("percentile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!("quantile q = {q} outside (0, 1]")));
    }
    let t = q * sorted.len() as f64;
    let k = (t - (t * 1e-12 + 1e-9)).ceil().max(1.0) as usize;
    Ok(sorted[k.min(sorted.len()) - 1])
}

/// 95th percentile of `|logit|` over the validation stream.
pub fn compute_gamma(model: &Backbone, validation: &[FeatureVector]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Data("empty validation stream".into()));
    }
    let mut magnitudes = validation
        .par_iter()
        .map(|x| model.forward(x).map(f64::abs))
        .collect::<Result<Vec<f64>>>()?;
    magnitudes.sort_unstable_by(f64::total_cmp);
    let gamma = nearest_rank(&magnitudes, GAMMA_PERCENTILE)?;
    if gamma == 0.0 {
        return Err(Error::DegenerateCalibration(
            "95th percentile of |logit| is zero; the logit normalizer would divide by zero".into(),
        ));
    }
    Ok(gamma)
}

/// Per-field `rho`-quantiles of composite scores over the sample. Every
/// field must be observed unmasked at least once.
pub fn compute_field_thresholds(
    model: &Backbone,
    sketch: &FrequencySketch,
    sample: &[FeatureVector],
    rho: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Data("empty calibration sample".into()));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Parameter(format!("rho = {rho} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta = {beta} outside [0, 1]")));
    }
    let n = model.num_fields();
    if sketch.num_fields() != n {
        return Err(Error::Schema(format!(
            "sketch has {} fields, model expects {n}",
            sketch.num_fields()
        )));
    }

    let per_instance = sample
        .par_iter()
        .map(|x| {
            let attribution = model.input_gradients(x)?;
            let present = x.present();
            let mut freqs = vec![0.0; n];
            for (i, slot) in x.fields.iter().enumerate() {
                if let Some(token) = slot {
                    freqs[i] = sketch.normalized_freq(i, *token)?;
                }
            }
            let scores = composite_scores(&attribution, &freqs, &present, beta)?;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                if present[i] {
                    out.push((i, scores.w[i]));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<(usize, f64)>>>>()?;

    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); n];
    for rows in per_instance {
        for (field, w) in rows {
            pools[field].push(w);
        }
    }
    let mut thresholds = Vec::with_capacity(n);
    for (field, pool) in pools.iter_mut().enumerate() {
        if pool.is_empty() {
            return Err(Error::FieldCoverage { field });
        }
        pool.sort_unstable_by(f64::total_cmp);
        thresholds.push(nearest_rank(pool, rho)?);
    }
    Ok(thresholds)
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    format_version: u32,
    gamma: f64,
    field_thresholds: Vec<f64>,
    rho: f64,
    eta: u64,
    sample_size: usize,
    created_at: String,
    hyperparams_hash: String,
}

pub fn save_profile(profile: &CalibrationProfile, path: &Path) -> Result<()> {
    let file = ProfileFile {
        format_version: PROFILE_FORMAT_VERSION,
        gamma: profile.gamma,
        field_thresholds: profile.field_thresholds.clone(),
        rho: profile.rho,
        eta: profile.eta,
        sample_size: profile.sample_size,
        created_at: profile.created_at.clone(),
        hyperparams_hash: format!("{:016x}", profile.hyperparams_hash),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &file)
        .map_err(|e| Error::Format(format!("profile serialization failed: {e}")))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<CalibrationProfile> {
    let text = std::fs::read_to_string(path)?;
    let file: ProfileFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("malformed profile document: {e}")))?;
    if file.format_version != PROFILE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported profile format_version {}",
            file.format_version
        )));
    }
    let hash = u64::from_str_radix(&file.hyperparams_hash, 16)
        .map_err(|_| Error::Format("hyperparams_hash is not a hex string".into()))?;
    Ok(CalibrationProfile {
        gamma: file.gamma,
        field_thresholds: file.field_thresholds,
        rho: file.rho,
        eta: file.eta,
        sample_size: file.sample_size,
        created_at: file.created_at,
        hyperparams_hash: hash,
    })
}
