//! Stochastic feature-path construction and scoring (stage 2).
//!
//! A path is built over `t_steps` rounds: at each round the composite weights
//! are renormalized over the kept fields not yet selected, one independent
//! Bernoulli draw per candidate decides inclusion, and the round's successes
//! join the path. Construction stops early once every kept field is in. Each
//! path is seeded by `mix_seed(base_seed, instance_id, path_index)`, so a
//! path is fully determined by that triple regardless of execution order.

use crate::data::FeatureVector;
use crate::error::Result;
use crate::hashing::mix_seed;
use crate::model::{sigmoid, Backbone};
use crate::rng::SplitMix64;

/// One exploration path: the sampled feature subset and its prediction.
#[derive(Debug, Clone)]
pub struct FeaturePath {
    pub selected: Vec<bool>,
    pub prediction: f64,
    /// 1-based index within the instance's path set.
    pub path_index: usize,
    pub rng_seed: u64,
}

/// Per-candidate selection probabilities for one round: weights renormalized
/// over the candidate set. All-zero weights fall back to uniform.
pub fn step_probs(weights: &[f64], candidates: &[usize]) -> Vec<f64> {
    let total: f64 = candidates.iter().map(|&i| weights[i]).sum();
    if total > 0.0 {
        candidates.iter().map(|&i| weights[i] / total).collect()
    } else {
        vec![1.0 / candidates.len() as f64; candidates.len()]
    }
}

/// Builds one path over the kept fields. Returns the selected flags and
/// whether the empty-path safeguard fired (no draw succeeded in `t_steps`
/// rounds, forcing the highest-weight kept field).
pub fn build_path(
    kept: &[bool],
    weights: &[f64],
    t_steps: usize,
    seed: u64,
) -> (Vec<bool>, bool) {
    let mut rng = SplitMix64::new(seed);
    let mut selected = vec![false; kept.len()];
    for _ in 0..t_steps {
        let candidates: Vec<usize> = (0..kept.len())
            .filter(|&i| kept[i] && !selected[i])
            .collect();
        if candidates.is_empty() {
            break;
        }
        let probs = step_probs(weights, &candidates);
        for (slot, p) in candidates.iter().zip(&probs) {
            if rng.bernoulli(*p) {
                selected[*slot] = true;
            }
        }
    }
    if selected.iter().any(|&s| s) {
        return (selected, false);
    }
    // Safeguard: T rounds can all fail when weights are tiny. Force the
    // strongest kept field, ties toward the lowest index.
    let mut best: Option<usize> = None;
    for i in 0..kept.len() {
        if kept[i] {
            match best {
                Some(b) if weights[i] <= weights[b] => {}
                _ => best = Some(i),
            }
        }
    }
    if let Some(b) = best {
        selected[b] = true;
    }
    (selected, true)
}

/// Prediction for a masked view: sigmoid of the forward pass with all
/// non-selected fields masked.
pub fn score_path(model: &Backbone, x: &FeatureVector, selected: &[bool]) -> Result<f64> {
    Ok(sigmoid(model.forward_masked(x, Some(selected))?))
}

/// Samples and scores `k` paths. Path `j` is seeded from
/// `(base_seed, instance_id, j)`; results are ordered by path index.
/// Returns the paths and whether any safeguard fired.
pub fn explore(
    model: &Backbone,
    x: &FeatureVector,
    kept: &[bool],
    weights: &[f64],
    k: usize,
    t_steps: usize,
    base_seed: u64,
) -> Result<(Vec<FeaturePath>, bool)> {
    let mut paths = Vec::with_capacity(k);
    let mut any_forced = false;
    for j in 1..=k {
        let seed = mix_seed(base_seed, x.instance_id, j as u64);
        let (selected, forced) = build_path(kept, weights, t_steps, seed);
        any_forced |= forced;
        let prediction = score_path(model, x, &selected)?;
        paths.push(FeaturePath {
            selected,
            prediction,
            path_index: j,
            rng_seed: seed,
        });
    }
    Ok((paths, any_forced))
}
