//! Synthetic CTR corpus generator.
//!
//! Field values follow a per-field Zipf law, so tail values are seen a
//! handful of times while head values saturate any frequency index — the
//! regime that makes frequency a useful reliability signal. The ground-truth
//! click probability is `sigmoid(bias + per-value weights + pairwise weights
//! on a sampled set of field pairs)`; rare values carry weights as large as
//! frequent ones, so a trained backbone underfits them by construction.
//! Labels are Bernoulli draws optionally flipped with `label_noise`, which
//! injects irreducible ambiguity; the stored ground truth is the
//! post-flip click probability.
//!
//! Everything is derived from `seed` through fixed derivation paths, so a
//! spec maps to byte-identical corpora on every run.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, FeatureVector};
use crate::error::{Error, Result};
use crate::hashing::{mix_seed, value_token};
use crate::model::sigmoid;
use crate::rng::SplitMix64;

fn default_bias() -> f64 {
    -1.0
}
fn default_value_weight_scale() -> f64 {
    3.0
}
fn default_pair_weight_scale() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_fields: usize,
    pub vocab_sizes: Vec<usize>,
    /// Zipf skew of value popularity; larger concentrates mass on the head.
    pub zipf_exponent: f64,
    /// Fraction of field pairs carrying true pairwise effects.
    pub interaction_density: f64,
    /// Label flip probability in `[0, 0.5]`.
    pub label_noise: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
    /// Global bias of the true logit.
    #[serde(default = "default_bias")]
    pub bias: f64,
    /// Scale of per-value weights (0 disables them).
    #[serde(default = "default_value_weight_scale")]
    pub value_weight_scale: f64,
    /// Scale of pairwise weights (0 disables them).
    #[serde(default = "default_pair_weight_scale")]
    pub pair_weight_scale: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_fields == 0 {
            return Err(Error::Parameter("num_fields must be positive".into()));
        }
        if self.vocab_sizes.len() != self.num_fields {
            return Err(Error::Parameter(format!(
                "vocab_sizes has {} entries for {} fields",
                self.vocab_sizes.len(),
                self.num_fields
            )));
        }
        if self.vocab_sizes.iter().any(|&v| v == 0) {
            return Err(Error::Parameter("vocab sizes must be positive".into()));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Parameter("zipf_exponent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.interaction_density) {
            return Err(Error::Parameter("interaction_density outside [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::Parameter("label_noise outside [0, 0.5]".into()));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return Err(Error::Parameter("num_train and num_test must be positive".into()));
        }
        Ok(())
    }
}

/// The latent click model behind a generated corpus.
struct TruthModel {
    bias: f64,
    /// Per field, per value index.
    value_weights: Vec<Vec<f64>>,
    /// Interacting field pairs with their hash seeds.
    pairs: Vec<(usize, usize, u64)>,
    pair_scale: f64,
}

impl TruthModel {
    fn build(spec: &SynthSpec) -> Self {
        let value_scale = spec.value_weight_scale / (spec.num_fields as f64).sqrt();
        let value_weights = (0..spec.num_fields)
            .map(|f| {
                let mut rng = SplitMix64::new(mix_seed(spec.seed, 0x5741, f as u64));
                (0..spec.vocab_sizes[f])
                    .map(|_| rng.normal() * value_scale)
                    .collect()
            })
            .collect();

        let mut all_pairs = Vec::new();
        for i in 0..spec.num_fields {
            for j in (i + 1)..spec.num_fields {
                all_pairs.push((i, j));
            }
        }
        let mut rng = SplitMix64::new(mix_seed(spec.seed, 0x5042, 0));
        rng.shuffle(&mut all_pairs);
        let take = (spec.interaction_density * all_pairs.len() as f64).floor() as usize;
        let pairs: Vec<(usize, usize, u64)> = all_pairs
            .into_iter()
            .take(take)
            .enumerate()
            .map(|(p, (i, j))| (i, j, mix_seed(spec.seed, 0x5043, p as u64)))
            .collect();
        let pair_scale = spec.pair_weight_scale / (pairs.len().max(1) as f64).sqrt();
        Self {
            bias: spec.bias,
            value_weights,
            pairs,
            pair_scale,
        }
    }

    /// Deterministic pairwise effect for a (pair, value, value) combination.
    fn pair_effect(&self, pair_seed: u64, a: usize, b: usize) -> f64 {
        let h = mix_seed(pair_seed, a as u64, b as u64);
        SplitMix64::new(h).normal() * self.pair_scale
    }

    fn true_logit(&self, values: &[usize]) -> f64 {
        let mut logit = self.bias;
        for (f, &v) in values.iter().enumerate() {
            logit += self.value_weights[f][v];
        }
        for &(i, j, seed) in &self.pairs {
            logit += self.pair_effect(seed, values[i], values[j]);
        }
        logit
    }
}

/// Per-field cumulative Zipf mass for inverse-CDF sampling.
fn zipf_cdf(vocab: usize, exponent: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(vocab);
    let mut total = 0.0;
    for v in 0..vocab {
        total += ((v + 1) as f64).powf(-exponent);
        cum.push(total);
    }
    for c in cum.iter_mut() {
        *c /= total;
    }
    cum
}

fn sample_zipf(cdf: &[f64], u: f64) -> usize {
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) => i,
        Err(i) => i.min(cdf.len() - 1),
    }
}

/// One generated instance before formatting.
struct Row {
    id: u64,
    label: u8,
    values: Vec<usize>,
    true_prob: f64,
}

fn for_each_row(spec: &SynthSpec, mut emit: impl FnMut(Row) -> Result<()>) -> Result<()> {
    spec.validate()?;
    let truth = TruthModel::build(spec);
    let cdfs: Vec<Vec<f64>> = spec
        .vocab_sizes
        .iter()
        .map(|&v| zipf_cdf(v, spec.zipf_exponent))
        .collect();
    let mut rng = SplitMix64::new(mix_seed(spec.seed, 0xD474, 0));
    let total = spec.num_train + spec.num_test;
    let mut values = vec![0usize; spec.num_fields];
    for id in 0..total as u64 {
        for (f, cdf) in cdfs.iter().enumerate() {
            values[f] = sample_zipf(cdf, rng.next_f64());
        }
        let p_true = sigmoid(truth.true_logit(&values));
        let mut label = u8::from(rng.bernoulli(p_true));
        let flip = rng.bernoulli(spec.label_noise);
        if flip {
            label ^= 1;
        }
        let p_reported = p_true * (1.0 - spec.label_noise) + (1.0 - p_true) * spec.label_noise;
        emit(Row {
            id,
            label,
            values: values.clone(),
            true_prob: p_reported,
        })?;
    }
    Ok(())
}

/// Output file paths of one generation run.
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub truth: PathBuf,
}

/// Generates the corpus into `dir` as `train.tsv`, `test.tsv`, and
/// `ground_truth.tsv`. Train and test ids are disjoint by construction.
pub fn generate_to_dir(spec: &SynthSpec, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir)?;
    let files = SynthFiles {
        train: dir.join("train.tsv"),
        test: dir.join("test.tsv"),
        truth: dir.join("ground_truth.tsv"),
    };
    let mut train = BufWriter::new(std::fs::File::create(&files.train)?);
    let mut test = BufWriter::new(std::fs::File::create(&files.test)?);
    let mut truth = BufWriter::new(std::fs::File::create(&files.truth)?);
    writeln!(train, "#fields:{}", spec.num_fields)?;
    writeln!(test, "#fields:{}", spec.num_fields)?;
    let split = spec.num_train as u64;
    for_each_row(spec, |row| {
        let out = if row.id < split { &mut train } else { &mut test };
        write!(out, "{}\t{}", row.id, row.label)?;
        for v in &row.values {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
        writeln!(truth, "{}\t{:.17e}", row.id, row.true_prob)?;
        Ok(())
    })?;
    train.flush()?;
    test.flush()?;
    truth.flush()?;
    Ok(files)
}

/// In-memory generation: `(train, test, ground truth)`. Tokens match what
/// reading the written TSV files back would produce.
pub fn generate(
    spec: &SynthSpec,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>, Vec<(u64, f64)>)> {
    let mut train = Vec::with_capacity(spec.num_train);
    let mut test = Vec::with_capacity(spec.num_test);
    let mut truth = Vec::with_capacity(spec.num_train + spec.num_test);
    let split = spec.num_train as u64;
    let mut buf = itoa_cache(spec);
    for_each_row(spec, |row| {
        let fields = row
            .values
            .iter()
            .map(|&v| Some(buf.token(v)))
            .collect::<Vec<_>>();
        let fv = FeatureVector {
            instance_id: row.id,
            fields,
            label: Some(row.label),
        };
        if row.id < split {
            train.push(fv);
        } else {
            test.push(fv);
        }
        truth.push((row.id, row.true_prob));
        Ok(())
    })?;
    Ok((train, test, truth))
}

/// Memoized decimal-string tokenization of value indices.
struct TokenCache {
    tokens: Vec<Option<u64>>,
}

fn itoa_cache(spec: &SynthSpec) -> TokenCache {
    let max_vocab = spec.vocab_sizes.iter().copied().max().unwrap_or(0);
    TokenCache {
        tokens: vec![None; max_vocab],
    }
}

impl TokenCache {
    fn token(&mut self, v: usize) -> u64 {
        if let Some(t) = self.tokens[v] {
            return t;
        }
        let t = value_token(&v.to_string());
        self.tokens[v] = Some(t);
        t
    }
}

/// Convenience wrapper exposing `data::read_corpus` results for a spec
/// written to a scratch directory; used in tests comparing the two routes.
pub fn read_back(files: &SynthFiles) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    let (_, train) = data::read_corpus(&files.train)?;
    let (_, test) = data::read_corpus(&files.test)?;
    Ok((train, test))
}
