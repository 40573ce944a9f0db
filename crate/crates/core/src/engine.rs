//! Per-instance inference orchestration.
//!
//! One call runs the whole pipeline: base forward pass with attribution,
//! dual-signal uncertainty, path budget, feature filtering, a refined pass,
//! conditional path exploration, and consistency-weighted aggregation. Every
//! step is recorded in an [`InferenceTrace`], including the model-call count
//! (base-with-attribution = 1, refined = 1, plus one per path).
//!
//! Batches fan instances across a worker pool; traces come back in input
//! order and are bit-identical for any worker count because all sampling is
//! keyed on `(base_seed, instance_id, path_index)`.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate;
use crate::calib::{hyperparams_digest, CalibrationProfile};
use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::explore::{self, FeaturePath};
use crate::model::{sigmoid, Backbone};
use crate::refine;
use crate::sketch::FrequencySketch;
use crate::uncertain;

/// Pipeline variants: `Full` is the complete procedure, the others disable
/// one mechanism each, and `BaseOnly` is a raw backbone passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Logit-only uncertainty (alpha forced to 1).
    NoDual,
    /// Uniform path sampling weights instead of composite scores.
    NoAttr,
    /// At most one exploration path per uncertain instance.
    SinglePath,
    /// sigmoid(base logit), no filtering, no exploration.
    BaseOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDual => "no_dual",
            Ablation::NoAttr => "no_attr",
            Ablation::SinglePath => "single_path",
            Ablation::BaseOnly => "base_only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_dual" => Ok(Ablation::NoDual),
            "no_attr" => Ok(Ablation::NoAttr),
            "single_path" => Ok(Ablation::SinglePath),
            "base_only" => Ok(Ablation::BaseOnly),
            other => Err(Error::Parameter(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub k_max: usize,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub t_steps: usize,
    pub lambda: f64,
    pub base_seed: u64,
    pub ablation: Ablation,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            alpha: 0.05,
            beta: 0.4,
            rho: 0.2,
            t_steps: 10,
            lambda: 5.0,
            base_seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Parameter(format!("rho = {} outside (0, 1)", self.rho)));
        }
        if self.t_steps == 0 {
            return Err(Error::Parameter("t_steps must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda = {} is negative", self.lambda)));
        }
        Ok(())
    }

    /// Digest of the hyperparameters entering threshold calibration, used
    /// for profile drift detection. `eta` comes from the sketch in force.
    pub fn hyperparams_hash(&self, eta: u64) -> u64 {
        hyperparams_digest(
            self.alpha,
            self.beta,
            self.rho,
            self.k_max,
            self.t_steps,
            self.lambda,
            eta,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TraceFlag {
    AllFilteredSafeguard,
    EmptyPathSafeguard,
    ProfileDrift,
}

impl TraceFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceFlag::AllFilteredSafeguard => "all_filtered_safeguard",
            TraceFlag::EmptyPathSafeguard => "empty_path_safeguard",
            TraceFlag::ProfileDrift => "profile_drift",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "all_filtered_safeguard" => Ok(TraceFlag::AllFilteredSafeguard),
            "empty_path_safeguard" => Ok(TraceFlag::EmptyPathSafeguard),
            "profile_drift" => Ok(TraceFlag::ProfileDrift),
            other => Err(Error::Format(format!("unknown trace flag {other:?}"))),
        }
    }
}

/// Complete per-instance record of one inference.
#[derive(Debug, Clone)]
pub struct InferenceTrace {
    pub instance_id: u64,
    pub base_logit: f64,
    pub attr: Vec<f64>,
    pub s_model: f64,
    pub s_freq: f64,
    pub u: f64,
    pub k: usize,
    pub kept: Vec<bool>,
    pub refined_prob: f64,
    pub paths: Vec<FeaturePath>,
    /// Aggregation weights over `[refined, path_1 .. path_k]`; empty when no
    /// aggregation ran (`k = 0` or base-only).
    pub weights: Vec<f64>,
    pub final_prob: f64,
    pub model_calls: usize,
    pub flags: Vec<TraceFlag>,
}

fn check_inputs(
    model: &Backbone,
    sketch: &FrequencySketch,
    profile: &CalibrationProfile,
    config: &EngineConfig,
) -> Result<()> {
    config.validate()?;
    if !model.frozen() {
        return Err(Error::Frozen("inference requires a frozen model".into()));
    }
    let n = model.num_fields();
    if sketch.num_fields() != n {
        return Err(Error::Schema(format!(
            "sketch has {} fields, model has {n}",
            sketch.num_fields()
        )));
    }
    if profile.field_thresholds.len() != n {
        return Err(Error::Schema(format!(
            "profile has {} thresholds, model has {n} fields",
            profile.field_thresholds.len()
        )));
    }
    Ok(())
}

/// Runs the full pipeline on one instance.
pub fn infer(
    model: &Backbone,
    sketch: &FrequencySketch,
    profile: &CalibrationProfile,
    config: &EngineConfig,
    x: &FeatureVector,
) -> Result<InferenceTrace> {
    check_inputs(model, sketch, profile, config)?;
    infer_unchecked(model, sketch, profile, config, x)
}

/// Pipeline body without the shared-input checks; batch runs validate once.
fn infer_unchecked(
    model: &Backbone,
    sketch: &FrequencySketch,
    profile: &CalibrationProfile,
    config: &EngineConfig,
    x: &FeatureVector,
) -> Result<InferenceTrace> {
    let n = model.num_fields();
    let mut flags = Vec::new();
    if profile.hyperparams_hash != config.hyperparams_hash(sketch.eta()) {
        flags.push(TraceFlag::ProfileDrift);
    }

    // Base pass with attribution: one model call.
    let attribution = model.input_gradients(x)?;
    let base_logit = attribution.logit;
    let present = x.present();

    let mut freqs = vec![0.0; n];
    for (i, slot) in x.fields.iter().enumerate() {
        if let Some(token) = slot {
            freqs[i] = sketch.normalized_freq(i, *token)?;
        }
    }

    let s_model = uncertain::model_confidence(base_logit, profile.gamma)?;
    let s_freq = uncertain::freq_confidence(&attribution.attr, &freqs, &present)?;
    let alpha = match config.ablation {
        Ablation::NoDual => 1.0,
        _ => config.alpha,
    };
    let u = uncertain::uncertainty(s_model, s_freq, alpha)?;

    if config.ablation == Ablation::BaseOnly {
        let p = sigmoid(base_logit);
        return Ok(InferenceTrace {
            instance_id: x.instance_id,
            base_logit,
            attr: attribution.attr,
            s_model,
            s_freq,
            u,
            k: 0,
            kept: present,
            refined_prob: p,
            paths: Vec::new(),
            weights: Vec::new(),
            final_prob: p,
            model_calls: 1,
            flags,
        });
    }

    let mut k = uncertain::path_budget(u, config.k_max);
    if config.ablation == Ablation::SinglePath {
        k = k.min(1);
    }

    let scores = refine::composite_scores(&attribution, &freqs, &present, config.beta)?;
    let (kept, safeguard) = refine::filter(x, &scores, profile);
    if safeguard {
        flags.push(TraceFlag::AllFilteredSafeguard);
    }

    // Refined pass: second model call.
    let refined = refine::refined_prediction(model, x, &kept)?;

    let (paths, weights, final_prob) = if k == 0 {
        (Vec::new(), Vec::new(), refined.refined_prob)
    } else {
        let uniform;
        let sampling_weights: &[f64] = match config.ablation {
            Ablation::NoAttr => {
                uniform = vec![1.0; n];
                &uniform
            }
            _ => &scores.w,
        };
        let (paths, forced) = explore::explore(
            model,
            x,
            &kept,
            sampling_weights,
            k,
            config.t_steps,
            config.base_seed,
        )?;
        if forced {
            flags.push(TraceFlag::EmptyPathSafeguard);
        }
        let mut predictions = Vec::with_capacity(k + 1);
        predictions.push(refined.refined_prob);
        predictions.extend(paths.iter().map(|p| p.prediction));
        let agg = aggregate::aggregate(&predictions, config.lambda)?;
        (paths, agg.weights, agg.final_prediction)
    };

    flags.sort_unstable();
    flags.dedup();
    Ok(InferenceTrace {
        instance_id: x.instance_id,
        base_logit,
        attr: attribution.attr,
        s_model,
        s_freq,
        u,
        k,
        kept,
        refined_prob: refined.refined_prob,
        paths,
        weights,
        final_prob,
        model_calls: 2 + k,
        flags,
    })
}

const BATCH_CHUNK: usize = 4096;

/// Runs a batch across `worker_count` threads, delivering traces to `sink`
/// in input order. The first failing instance aborts the batch with its
/// index; later traces are withheld.
pub fn infer_batch_with<F>(
    model: &Backbone,
    sketch: &FrequencySketch,
    profile: &CalibrationProfile,
    config: &EngineConfig,
    instances: &[FeatureVector],
    worker_count: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(InferenceTrace) -> Result<()>,
{
    if worker_count == 0 {
        return Err(Error::Parameter("worker_count must be >= 1".into()));
    }
    check_inputs(model, sketch, profile, config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))?;

    for (chunk_idx, chunk) in instances.chunks(BATCH_CHUNK).enumerate() {
        let results: Vec<Result<InferenceTrace>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|x| infer_unchecked(model, sketch, profile, config, x))
                .collect()
        });
        for (offset, result) in results.into_iter().enumerate() {
            match result {
                Ok(trace) => sink(trace)?,
                Err(e) => {
                    return Err(Error::Batch {
                        index: chunk_idx * BATCH_CHUNK + offset,
                        source: Box::new(e),
                    })
                }
            }
        }
    }
    Ok(())
}

/// Batch run collecting all traces in memory.
pub fn infer_batch(
    model: &Backbone,
    sketch: &FrequencySketch,
    profile: &CalibrationProfile,
    config: &EngineConfig,
    instances: &[FeatureVector],
    worker_count: usize,
) -> Result<Vec<InferenceTrace>> {
    let mut out = Vec::with_capacity(instances.len());
    infer_batch_with(model, sketch, profile, config, instances, worker_count, |t| {
        out.push(t);
        Ok(())
    })?;
    Ok(out)
}

// --- Trace file format -----------------------------------------------------
//
// One JSON object per line, fixed key order, floats printed with 17
// significant digits so a reload reproduces every f64 bit-for-bit.

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_f64_slice(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", items.join(","))
}

fn fmt_bools(vs: &[bool]) -> String {
    let items: Vec<&str> = vs.iter().map(|&b| if b { "true" } else { "false" }).collect();
    format!("[{}]", items.join(","))
}

/// Serializes one trace as a single JSON line (no trailing newline).
pub fn trace_to_json(t: &InferenceTrace) -> String {
    let paths: Vec<String> = t
        .paths
        .iter()
        .map(|p| {
            format!(
                "{{\"selected\":{},\"prediction\":{},\"seed\":{}}}",
                fmt_bools(&p.selected),
                fmt_f64(p.prediction),
                p.rng_seed
            )
        })
        .collect();
    let flags: Vec<String> = t.flags.iter().map(|f| format!("\"{}\"", f.as_str())).collect();
    format!(
        "{{\"instance_id\":{},\"base_logit\":{},\"attr\":{},\"s_model\":{},\"s_freq\":{},\"u\":{},\"k\":{},\"kept\":{},\"refined_prob\":{},\"paths\":[{}],\"weights\":{},\"final_prob\":{},\"model_calls\":{},\"flags\":[{}]}}",
        t.instance_id,
        fmt_f64(t.base_logit),
        fmt_f64_slice(&t.attr),
        fmt_f64(t.s_model),
        fmt_f64(t.s_freq),
        fmt_f64(t.u),
        t.k,
        fmt_bools(&t.kept),
        fmt_f64(t.refined_prob),
        paths.join(","),
        fmt_f64_slice(&t.weights),
        fmt_f64(t.final_prob),
        t.model_calls,
        flags.join(",")
    )
}

fn json_f64(v: &serde_json::Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| Error::Format(format!("trace record missing float field {key:?}")))
}

fn json_u64(v: &serde_json::Value, key: &str) -> Result<u64> {
    v.get(key)
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format(format!("trace record missing integer field {key:?}")))
}

fn json_f64_vec(v: &serde_json::Value, key: &str) -> Result<Vec<f64>> {
    v.get(key)
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| Error::Format(format!("trace record missing array field {key:?}")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::Format(format!("non-float entry in {key:?}")))
        })
        .collect()
}

fn json_bool_vec(v: &serde_json::Value, key: &str) -> Result<Vec<bool>> {
    v.get(key)
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| Error::Format(format!("trace record missing array field {key:?}")))?
        .iter()
        .map(|x| {
            x.as_bool()
                .ok_or_else(|| Error::Format(format!("non-bool entry in {key:?}")))
        })
        .collect()
}

/// Parses one trace line.
pub fn trace_from_json(line: &str) -> Result<InferenceTrace> {
    let v: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| Error::Format(format!("malformed trace line: {e}")))?;
    let paths_json = v
        .get("paths")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| Error::Format("trace record missing paths".into()))?;
    let mut paths = Vec::with_capacity(paths_json.len());
    for (i, p) in paths_json.iter().enumerate() {
        paths.push(FeaturePath {
            selected: json_bool_vec(p, "selected")?,
            prediction: json_f64(p, "prediction")?,
            path_index: i + 1,
            rng_seed: json_u64(p, "seed")?,
        });
    }
    let flags_json = v
        .get("flags")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| Error::Format("trace record missing flags".into()))?;
    let mut flags = Vec::with_capacity(flags_json.len());
    for f in flags_json {
        let s = f
            .as_str()
            .ok_or_else(|| Error::Format("non-string trace flag".into()))?;
        flags.push(TraceFlag::parse(s)?);
    }
    Ok(InferenceTrace {
        instance_id: json_u64(&v, "instance_id")?,
        base_logit: json_f64(&v, "base_logit")?,
        attr: json_f64_vec(&v, "attr")?,
        s_model: json_f64(&v, "s_model")?,
        s_freq: json_f64(&v, "s_freq")?,
        u: json_f64(&v, "u")?,
        k: json_u64(&v, "k")? as usize,
        kept: json_bool_vec(&v, "kept")?,
        refined_prob: json_f64(&v, "refined_prob")?,
        paths,
        weights: json_f64_vec(&v, "weights")?,
        final_prob: json_f64(&v, "final_prob")?,
        model_calls: json_u64(&v, "model_calls")? as usize,
        flags,
    })
}

/// Writes traces as JSON lines.
pub fn write_traces<W: Write>(out: &mut W, traces: &[InferenceTrace]) -> Result<()> {
    for t in traces {
        writeln!(out, "{}", trace_to_json(t))?;
    }
    Ok(())
}

/// Reads a JSON-lines trace file.
pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<InferenceTrace>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(trace_from_json(&line)?);
    }
    Ok(out)
}
