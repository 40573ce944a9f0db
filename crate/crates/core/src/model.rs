//! Reference CTR backbone: per-field embeddings, an optional
//! factorization-machine pairwise term, and an optional MLP head.
//!
//! The backbone exists to stand in for "any frozen differentiable CTR model":
//! it supports masked forward passes (absent fields contribute a zero
//! embedding), exact reverse-mode gradients of the logit with respect to each
//! field's embedding vector, and a small mini-batch Adam trainer that freezes
//! the parameters on completion. All math is `f64`.
//!
//! Architecture, per instance with embeddings `e_1..e_N` (dim `d` each):
//!
//! ```text
//! logit = global_bias
//!       + head(concat(e_1..e_N))          (if an MLP head is configured)
//!       + sum_{i<j} dot(e_i, e_j)         (if the FM term is enabled)
//! ```
//!
//! The head is a stack of ReLU hidden layers followed by a linear output
//! layer; an empty hidden list means a single linear layer, which yields the
//! plain logistic-regression-on-embeddings variant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use std::collections::HashMap;

use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::hashing::Fnv64;
use crate::rng::SplitMix64;

const MAGIC: &[u8; 4] = b"UTMD";
const VERSION: u8 = 0x01;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-field gradient L2 norms plus the logit of the pass that produced them.
#[derive(Debug, Clone)]
pub struct AttributionVector {
    /// `attr[i] >= 0`; exactly 0 for masked fields by definition.
    pub attr: Vec<f64>,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub num_fields: usize,
    /// Hashing-trick bucket count per field; tokens index rows by modulo.
    pub bucket_counts: Vec<usize>,
    pub embed_dim: usize,
    /// `None`: no head. `Some(vec![])`: linear head. `Some([64, 32])`: ReLU MLP.
    pub mlp_hidden: Option<Vec<usize>>,
    pub use_fm: bool,
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.num_fields == 0 || self.embed_dim == 0 {
            return Err(Error::Parameter(
                "backbone needs positive num_fields and embed_dim".into(),
            ));
        }
        if self.bucket_counts.len() != self.num_fields {
            return Err(Error::Parameter(format!(
                "bucket_counts has {} entries for {} fields",
                self.bucket_counts.len(),
                self.num_fields
            )));
        }
        if self.bucket_counts.iter().any(|&b| b == 0) {
            return Err(Error::Parameter("bucket counts must be positive".into()));
        }
        if self.mlp_hidden.is_none() && !self.use_fm {
            return Err(Error::Parameter(
                "backbone with no head and no FM term has no trainable signal".into(),
            ));
        }
        Ok(())
    }

    /// (in, out) dimensions of each dense layer, output layer included.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match &self.mlp_hidden {
            None => Vec::new(),
            Some(hidden) => {
                let mut dims = Vec::with_capacity(hidden.len() + 1);
                let mut prev = self.num_fields * self.embed_dim;
                for &w in hidden {
                    dims.push((prev, w));
                    prev = w;
                }
                dims.push((prev, 1));
                dims
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }

    /// `grad_in += W^T delta`
    fn back_input(&self, delta: &[f64], grad_in: &mut [f64]) {
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let d = delta[o];
            for (g, w) in grad_in.iter_mut().zip(row) {
                *g += w * d;
            }
        }
    }
}

/// Deconstructed backbone, used for serialization and for tests that need to
/// perturb individual parameters.
#[derive(Debug, Clone)]
pub struct BackboneParts {
    pub config: BackboneConfig,
    /// Per field: `bucket_count x embed_dim`, row-major.
    pub embeddings: Vec<Vec<f64>>,
    pub layers: Vec<DenseLayer>,
    pub global_bias: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    embeddings: Vec<Vec<f64>>,
    layers: Vec<DenseLayer>,
    global_bias: f64,
    frozen: bool,
}

pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 512,
            l2: 1e-6,
            seed: 1,
        }
    }
}

pub struct TrainOutcome {
    pub model: Backbone,
    /// Mean binary cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

impl Backbone {
    /// Fresh unfrozen backbone: Xavier-uniform dense layers, uniform
    /// `(-embed_init_scale, embed_init_scale)` embeddings.
    pub fn init(config: BackboneConfig, seed: u64, embed_init_scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let embeddings = config
            .bucket_counts
            .iter()
            .map(|&b| {
                (0..b * config.embed_dim)
                    .map(|_| (rng.next_f64() * 2.0 - 1.0) * embed_init_scale)
                    .collect()
            })
            .collect();
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let limit = (6.0 / (i + o) as f64).sqrt();
                let mut layer = DenseLayer::zeroed(i, o);
                for w in layer.weights.iter_mut() {
                    *w = (rng.next_f64() * 2.0 - 1.0) * limit;
                }
                layer
            })
            .collect();
        Ok(Self {
            config,
            embeddings,
            layers,
            global_bias: 0.0,
            frozen: false,
        })
    }

    pub fn from_parts(parts: BackboneParts) -> Result<Self> {
        parts.config.validate()?;
        let cfg = &parts.config;
        if parts.embeddings.len() != cfg.num_fields {
            return Err(Error::Parameter("embedding table count mismatch".into()));
        }
        for (i, table) in parts.embeddings.iter().enumerate() {
            if table.len() != cfg.bucket_counts[i] * cfg.embed_dim {
                return Err(Error::Parameter(format!(
                    "embedding table {i} has wrong size"
                )));
            }
        }
        let dims = cfg.layer_dims();
        if parts.layers.len() != dims.len() {
            return Err(Error::Parameter("layer count mismatch".into()));
        }
        for (layer, (i, o)) in parts.layers.iter().zip(&dims) {
            if layer.in_dim != *i
                || layer.out_dim != *o
                || layer.weights.len() != i * o
                || layer.bias.len() != *o
            {
                return Err(Error::Parameter("layer shape mismatch".into()));
            }
        }
        Ok(Self {
            config: parts.config,
            embeddings: parts.embeddings,
            layers: parts.layers,
            global_bias: parts.global_bias,
            frozen: parts.frozen,
        })
    }

    pub fn to_parts(&self) -> BackboneParts {
        BackboneParts {
            config: self.config.clone(),
            embeddings: self.embeddings.clone(),
            layers: self.layers.clone(),
            global_bias: self.global_bias,
            frozen: self.frozen,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_fields(&self) -> usize {
        self.config.num_fields
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn global_bias(&self) -> f64 {
        self.global_bias
    }

    /// Logit of the head on an all-zero input: the model's constant bias path.
    pub fn bias_only_logit(&self) -> f64 {
        let mut acc = self.global_bias;
        if !self.layers.is_empty() {
            let zero = vec![0.0; self.layers[0].in_dim];
            acc += self.head_forward(&zero, None);
        }
        acc
    }

    fn check_schema(&self, x: &FeatureVector) -> Result<()> {
        if x.num_fields() != self.config.num_fields {
            return Err(Error::Schema(format!(
                "instance {} has {} fields, model expects {}",
                x.instance_id,
                x.num_fields(),
                self.config.num_fields
            )));
        }
        Ok(())
    }

    #[inline]
    fn row_of(&self, field: usize, token: u64) -> usize {
        (token % self.config.bucket_counts[field] as u64) as usize
    }

    /// Concatenated embedding input; masked or dropped fields stay zero.
    fn gather(&self, x: &FeatureVector, keep: Option<&[bool]>) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut z = vec![0.0; self.config.num_fields * d];
        for (i, slot) in x.fields.iter().enumerate() {
            if let Some(token) = slot {
                if keep.map_or(true, |k| k[i]) {
                    let row = self.row_of(i, *token);
                    let table = &self.embeddings[i];
                    z[i * d..(i + 1) * d].copy_from_slice(&table[row * d..(row + 1) * d]);
                }
            }
        }
        z
    }

    /// Head output; when `pre` is given, pre-activations of every layer are
    /// stored for backprop.
    fn head_forward(&self, z: &[f64], mut pre: Option<&mut Vec<Vec<f64>>>) -> f64 {
        let mut act = z.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&act, &mut next);
            if let Some(store) = pre.as_deref_mut() {
                store.push(next.clone());
            }
            if l < last {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut act, &mut next);
        }
        act[0]
    }

    fn fm_term(&self, z: &[f64]) -> f64 {
        // sum_{i<j} dot(e_i, e_j) == 0.5 * (|sum_i e_i|^2 - sum_i |e_i|^2)
        let d = self.config.embed_dim;
        let mut sum = vec![0.0; d];
        let mut sq = 0.0;
        for chunk in z.chunks_exact(d) {
            for (s, v) in sum.iter_mut().zip(chunk) {
                *s += v;
            }
        }
        for v in z {
            sq += v * v;
        }
        let total: f64 = sum.iter().map(|s| s * s).sum();
        0.5 * (total - sq)
    }

    /// Forward pass; absent fields enter as zero embeddings.
    pub fn forward(&self, x: &FeatureVector) -> Result<f64> {
        self.forward_masked(x, None)
    }

    /// Forward pass with fields additionally masked wherever `keep` is false.
    pub fn forward_masked(&self, x: &FeatureVector, keep: Option<&[bool]>) -> Result<f64> {
        self.check_schema(x)?;
        let z = self.gather(x, keep);
        let mut logit = self.global_bias;
        if !self.layers.is_empty() {
            logit += self.head_forward(&z, None);
        }
        if self.config.use_fm {
            logit += self.fm_term(&z);
        }
        Ok(logit)
    }

    /// Gradient of the logit with respect to the concatenated embedding
    /// input, plus the logit. Shared by attribution and the trainer.
    fn input_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let d = self.config.embed_dim;
        let mut grad = vec![0.0; z.len()];
        let mut logit = self.global_bias;

        if !self.layers.is_empty() {
            let mut pre = Vec::with_capacity(self.layers.len());
            logit += self.head_forward(z, Some(&mut pre));
            // d logit / d u_last = 1
            let mut delta = vec![1.0];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                if l == 0 {
                    layer.back_input(&delta, &mut grad);
                } else {
                    let mut g_prev = vec![0.0; layer.in_dim];
                    layer.back_input(&delta, &mut g_prev);
                    for (g, u) in g_prev.iter_mut().zip(&pre[l - 1]) {
                        if *u <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    delta = g_prev;
                }
            }
        }

        if self.config.use_fm {
            logit += self.fm_term(z);
            let mut sum = vec![0.0; d];
            for chunk in z.chunks_exact(d) {
                for (s, v) in sum.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            // d fm / d e_i = S - e_i
            for (i, chunk) in grad.chunks_exact_mut(d).enumerate() {
                let e = &z[i * d..(i + 1) * d];
                for k in 0..d {
                    chunk[k] += sum[k] - e[k];
                }
            }
        }

        (logit, grad)
    }

    /// Exact reverse-mode gradient of the logit with respect to each field's
    /// embedding vector, reduced to L2 norms. Attribution of an absent field
    /// is 0 by definition. Never mutates parameters.
    pub fn input_gradients(&self, x: &FeatureVector) -> Result<AttributionVector> {
        self.check_schema(x)?;
        let d = self.config.embed_dim;
        let z = self.gather(x, None);
        let (logit, grad) = self.input_grad(&z);
        let attr = x
            .fields
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                if slot.is_some() {
                    grad[i * d..(i + 1) * d]
                        .iter()
                        .map(|g| g * g)
                        .sum::<f64>()
                        .sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Ok(AttributionVector { attr, logit })
    }

    /// FNV-1a digest over every parameter's little-endian bytes.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for table in &self.embeddings {
            for v in table {
                h.update(&v.to_le_bytes());
            }
        }
        for layer in &self.layers {
            for v in &layer.weights {
                h.update(&v.to_le_bytes());
            }
            for v in &layer.bias {
                h.update(&v.to_le_bytes());
            }
        }
        h.update(&self.global_bias.to_le_bytes());
        h.finish()
    }

    /// Mini-batch Adam on binary cross-entropy. Consumes the model and
    /// returns it frozen; rejects already-frozen models and unlabeled data.
    pub fn train(mut self, data: &[FeatureVector], cfg: &TrainConfig) -> Result<TrainOutcome> {
        if self.frozen {
            return Err(Error::Frozen("cannot train a frozen model".into()));
        }
        for x in data {
            self.check_schema(x)?;
            if x.label.is_none() {
                return Err(Error::Data(format!(
                    "unlabeled instance {} in training stream",
                    x.instance_id
                )));
            }
        }
        if cfg.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }

        let mut opt = AdamState::new(&self);
        let mut rng = SplitMix64::new(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0u64;
        let mut batch_index = 0usize;

        for _epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = BatchGrads::new(&self);
                let mut batch_loss = 0.0;
                for &idx in batch {
                    batch_loss += self.accumulate_instance(&data[idx], &mut grads);
                }
                let scale = 1.0 / batch.len() as f64;
                batch_loss *= scale;
                if !batch_loss.is_finite() {
                    return Err(Error::Divergence { batch: batch_index });
                }
                epoch_loss += batch_loss * batch.len() as f64;
                step += 1;
                opt.apply(&mut self, &grads, scale, cfg, step);
                batch_index += 1;
            }
            epoch_losses.push(epoch_loss / data.len() as f64);
        }

        self.frozen = true;
        Ok(TrainOutcome {
            model: self,
            epoch_losses,
        })
    }

    /// Per-instance loss and gradient accumulation (full backprop).
    fn accumulate_instance(&self, x: &FeatureVector, grads: &mut BatchGrads) -> f64 {
        let d = self.config.embed_dim;
        let z = self.gather(x, None);
        let label = f64::from(x.label.unwrap_or(0));

        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut logit = self.global_bias;
        if !self.layers.is_empty() {
            let mut act = z.clone();
            let mut next = Vec::new();
            let last = self.layers.len() - 1;
            for (l, layer) in self.layers.iter().enumerate() {
                acts.push(act.clone());
                layer.apply(&act, &mut next);
                pre.push(next.clone());
                if l < last {
                    for v in next.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                std::mem::swap(&mut act, &mut next);
            }
            logit += act[0];
        }
        if self.config.use_fm {
            logit += self.fm_term(&z);
        }

        let p = sigmoid(logit);
        let err = p - label; // d loss / d logit
        let loss = -(label * p.max(1e-300).ln() + (1.0 - label) * (1.0 - p).max(1e-300).ln());

        grads.global_bias += err;

        let mut grad_z = vec![0.0; z.len()];
        if !self.layers.is_empty() {
            let mut delta = vec![err];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let g = &mut grads.layers[l];
                let a = &acts[l];
                for o in 0..layer.out_dim {
                    let dout = delta[o];
                    g.bias[o] += dout;
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gw, av) in row.iter_mut().zip(a) {
                        *gw += dout * av;
                    }
                }
                if l == 0 {
                    layer.back_input(&delta, &mut grad_z);
                } else {
                    let mut g_prev = vec![0.0; layer.in_dim];
                    layer.back_input(&delta, &mut g_prev);
                    for (gp, u) in g_prev.iter_mut().zip(&pre[l - 1]) {
                        if *u <= 0.0 {
                            *gp = 0.0;
                        }
                    }
                    delta = g_prev;
                }
            }
        }
        if self.config.use_fm {
            let mut sum = vec![0.0; d];
            for chunk in z.chunks_exact(d) {
                for (s, v) in sum.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            for (i, chunk) in grad_z.chunks_exact_mut(d).enumerate() {
                let e = &z[i * d..(i + 1) * d];
                for k in 0..d {
                    chunk[k] += err * (sum[k] - e[k]);
                }
            }
        }

        for (i, slot) in x.fields.iter().enumerate() {
            if let Some(token) = slot {
                let row = self.row_of(i, *token);
                let entry = grads
                    .embeddings
                    .entry((i as u32, row as u32))
                    .or_insert_with(|| vec![0.0; d]);
                for (g, gz) in entry.iter_mut().zip(&grad_z[i * d..(i + 1) * d]) {
                    *g += gz;
                }
            }
        }
        loss
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        let cfg = &self.config;
        out.write_all(&(cfg.num_fields as u32).to_le_bytes())?;
        for &b in &cfg.bucket_counts {
            out.write_all(&(b as u32).to_le_bytes())?;
        }
        out.write_all(&(cfg.embed_dim as u32).to_le_bytes())?;
        match &cfg.mlp_hidden {
            None => {
                out.write_all(&[0u8])?;
                out.write_all(&0u32.to_le_bytes())?;
            }
            Some(hidden) => {
                out.write_all(&[1u8])?;
                out.write_all(&(hidden.len() as u32).to_le_bytes())?;
                for &w in hidden {
                    out.write_all(&(w as u32).to_le_bytes())?;
                }
            }
        }
        out.write_all(&[u8::from(cfg.use_fm)])?;
        out.write_all(&[u8::from(self.frozen)])?;
        for table in &self.embeddings {
            for v in table {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for layer in &self.layers {
            for v in &layer.weights {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in &layer.bias {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.write_all(&self.global_bias.to_le_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("not a model file (magic {magic:02x?})")));
        }
        let mut version = [0u8; 1];
        read_exact(&mut input, &mut version)?;
        if version[0] != VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                version[0]
            )));
        }
        let num_fields = read_u32(&mut input)? as usize;
        if num_fields == 0 || num_fields > 1 << 20 {
            return Err(Error::Format("implausible field count".into()));
        }
        let mut bucket_counts = Vec::with_capacity(num_fields);
        for _ in 0..num_fields {
            bucket_counts.push(read_u32(&mut input)? as usize);
        }
        let embed_dim = read_u32(&mut input)? as usize;
        let has_mlp = read_u8(&mut input)? != 0;
        let hidden_count = read_u32(&mut input)? as usize;
        let mut hidden = Vec::with_capacity(hidden_count);
        for _ in 0..hidden_count {
            hidden.push(read_u32(&mut input)? as usize);
        }
        let use_fm = read_u8(&mut input)? != 0;
        let frozen = read_u8(&mut input)? != 0;
        let config = BackboneConfig {
            num_fields,
            bucket_counts,
            embed_dim,
            mlp_hidden: has_mlp.then_some(hidden),
            use_fm,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("model schema fails validation: {e}")))?;

        let mut embeddings = Vec::with_capacity(num_fields);
        for &b in &config.bucket_counts {
            let mut table = vec![0.0; b * embed_dim];
            for v in table.iter_mut() {
                *v = read_f64(&mut input)?;
            }
            embeddings.push(table);
        }
        let mut layers = Vec::new();
        for (i, o) in config.layer_dims() {
            let mut layer = DenseLayer::zeroed(i, o);
            for v in layer.weights.iter_mut() {
                *v = read_f64(&mut input)?;
            }
            for v in layer.bias.iter_mut() {
                *v = read_f64(&mut input)?;
            }
            layers.push(layer);
        }
        let global_bias = read_f64(&mut input)?;
        Ok(Self {
            config,
            embeddings,
            layers,
            global_bias,
            frozen,
        })
    }
}

/// Per-batch gradient accumulators. Embedding gradients are sparse: only
/// rows touched by the batch are tracked.
struct BatchGrads {
    layers: Vec<DenseLayer>,
    embeddings: HashMap<(u32, u32), Vec<f64>>,
    global_bias: f64,
}

impl BatchGrads {
    fn new(model: &Backbone) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DenseLayer::zeroed(l.in_dim, l.out_dim))
                .collect(),
            embeddings: HashMap::new(),
            global_bias: 0.0,
        }
    }
}

struct AdamState {
    layer_m: Vec<DenseLayer>,
    layer_v: Vec<DenseLayer>,
    embed_m: Vec<Vec<f64>>,
    embed_v: Vec<Vec<f64>>,
    bias_m: f64,
    bias_v: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(model: &Backbone) -> Self {
        Self {
            layer_m: model
                .layers
                .iter()
                .map(|l| DenseLayer::zeroed(l.in_dim, l.out_dim))
                .collect(),
            layer_v: model
                .layers
                .iter()
                .map(|l| DenseLayer::zeroed(l.in_dim, l.out_dim))
                .collect(),
            embed_m: model.embeddings.iter().map(|t| vec![0.0; t.len()]).collect(),
            embed_v: model.embeddings.iter().map(|t| vec![0.0; t.len()]).collect(),
            bias_m: 0.0,
            bias_v: 0.0,
        }
    }

    #[inline]
    fn update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, lr: f64, corr1: f64, corr2: f64) {
        *m = BETA1 * *m + (1.0 - BETA1) * grad;
        *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
        let mhat = *m / corr1;
        let vhat = *v / corr2;
        *param -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }

    /// One optimizer step. `scale` converts summed gradients to batch means.
    /// Embedding rows use lazy moments: only touched rows advance, applied
    /// in sorted key order for determinism.
    fn apply(
        &mut self,
        model: &mut Backbone,
        grads: &BatchGrads,
        scale: f64,
        cfg: &TrainConfig,
        step: u64,
    ) {
        let lr = cfg.learning_rate;
        let corr1 = 1.0 - BETA1.powi(step as i32);
        let corr2 = 1.0 - BETA2.powi(step as i32);

        for (l, glayer) in grads.layers.iter().enumerate() {
            let layer = &mut model.layers[l];
            for (idx, gw) in glayer.weights.iter().enumerate() {
                let g = gw * scale + cfg.l2 * layer.weights[idx];
                Self::update(
                    &mut layer.weights[idx],
                    g,
                    &mut self.layer_m[l].weights[idx],
                    &mut self.layer_v[l].weights[idx],
                    lr,
                    corr1,
                    corr2,
                );
            }
            for (idx, gb) in glayer.bias.iter().enumerate() {
                Self::update(
                    &mut layer.bias[idx],
                    gb * scale,
                    &mut self.layer_m[l].bias[idx],
                    &mut self.layer_v[l].bias[idx],
                    lr,
                    corr1,
                    corr2,
                );
            }
        }

        let mut keys: Vec<&(u32, u32)> = grads.embeddings.keys().collect();
        keys.sort_unstable();
        let d = model.config.embed_dim;
        for &&(field, row) in &keys {
            let grad = &grads.embeddings[&(field, row)];
            let base = row as usize * d;
            let table = &mut model.embeddings[field as usize];
            let m = &mut self.embed_m[field as usize];
            let v = &mut self.embed_v[field as usize];
            for k in 0..d {
                let idx = base + k;
                let g = grad[k] * scale + cfg.l2 * table[idx];
                Self::update(&mut table[idx], g, &mut m[idx], &mut v[idx], lr, corr1, corr2);
            }
        }

        Self::update(
            &mut model.global_bias,
            grads.global_bias * scale,
            &mut self.bias_m,
            &mut self.bias_v,
            lr,
            corr1,
            corr2,
        );
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("model file truncated".into()))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureVector;

    /// Two-field linear model: dim-1 unit embeddings, head weights
    /// (0.5, -0.25), global bias 0.1.
    fn hand_linear() -> Backbone {
        let config = BackboneConfig {
            num_fields: 2,
            bucket_counts: vec![4, 4],
            embed_dim: 1,
            mlp_hidden: Some(vec![]),
            use_fm: false,
        };
        let mut embeddings = vec![vec![0.0; 4], vec![0.0; 4]];
        embeddings[0][1] = 1.0; // token 1 -> row 1
        embeddings[1][2] = 1.0; // token 2 -> row 2
        let head = DenseLayer {
            weights: vec![0.5, -0.25],
            bias: vec![0.0],
            in_dim: 2,
            out_dim: 1,
        };
        Backbone::from_parts(BackboneParts {
            config,
            embeddings,
            layers: vec![head],
            global_bias: 0.1,
            frozen: true,
        })
        .unwrap()
    }

    fn instance(tokens: &[Option<u64>]) -> FeatureVector {
        FeatureVector {
            instance_id: 0,
            fields: tokens.to_vec(),
            label: None,
        }
    }

    fn random_model(arch: &str, seed: u64) -> Backbone {
        let config = BackboneConfig {
            num_fields: 5,
            bucket_counts: vec![7, 11, 13, 5, 9],
            embed_dim: 3,
            mlp_hidden: match arch {
                "linear" => Some(vec![]),
                "fm" => None,
                _ => Some(vec![6, 4]),
            },
            use_fm: arch != "linear",
        };
        let mut model = Backbone::init(config, seed, 0.4).unwrap();
        model.freeze();
        model
    }

    fn random_instance(model: &Backbone, rng: &mut crate::rng::SplitMix64) -> FeatureVector {
        let fields = (0..model.num_fields())
            .map(|_| (rng.next_f64() > 0.15).then(|| rng.next_u64()))
            .collect();
        FeatureVector {
            instance_id: rng.next_u64(),
            fields,
            label: None,
        }
    }

    /// Independent forward evaluation from raw parts: explicit pairwise FM
    /// loop, layer-by-layer head. Returns the logit and the smallest hidden
    /// pre-activation magnitude (kink margin for finite differences).
    fn oracle_forward(parts: &BackboneParts, x: &FeatureVector) -> (f64, f64) {
        let cfg = &parts.config;
        let d = cfg.embed_dim;
        let n = cfg.num_fields;
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            if let Some(tok) = x.fields[i] {
                let row = (tok % cfg.bucket_counts[i] as u64) as usize;
                z[i * d..(i + 1) * d]
                    .copy_from_slice(&parts.embeddings[i][row * d..(row + 1) * d]);
            }
        }
        let mut logit = parts.global_bias;
        let mut margin = f64::INFINITY;
        if !parts.layers.is_empty() {
            let mut act = z.clone();
            for (l, layer) in parts.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim];
                for o in 0..layer.out_dim {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.in_dim {
                        acc += layer.weights[o * layer.in_dim + i] * act[i];
                    }
                    next[o] = acc;
                }
                if l + 1 < parts.layers.len() {
                    for v in next.iter_mut() {
                        margin = margin.min(v.abs());
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                act = next;
            }
            logit += act[0];
        }
        if cfg.use_fm {
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut dot = 0.0;
                    for k in 0..d {
                        dot += z[i * d + k] * z[j * d + k];
                    }
                    logit += dot;
                }
            }
        }
        (logit, margin)
    }

    /// Central-difference attribution for one present field.
    fn fd_attr(model: &Backbone, x: &FeatureVector, field: usize, h: f64) -> f64 {
        let parts = model.to_parts();
        let d = parts.config.embed_dim;
        let tok = x.fields[field].unwrap();
        let row = (tok % parts.config.bucket_counts[field] as u64) as usize;
        let mut sq = 0.0;
        for k in 0..d {
            let mut up = parts.clone();
            up.embeddings[field][row * d + k] += h;
            let mut dn = parts.clone();
            dn.embeddings[field][row * d + k] -= h;
            let fu = Backbone::from_parts(up).unwrap().forward(x).unwrap();
            let fl = Backbone::from_parts(dn).unwrap().forward(x).unwrap();
            let g = (fu - fl) / (2.0 * h);
            sq += g * g;
        }
        sq.sqrt()
    }

    #[test]
    fn hand_linear_forward() {
        let model = hand_linear();
        let x = instance(&[Some(1), Some(2)]);
        let logit = model.forward(&x).unwrap();
        assert!((logit - 0.35).abs() < 1e-12);
    }

    #[test]
    fn hand_linear_attribution() {
        let model = hand_linear();
        let x = instance(&[Some(1), Some(2)]);
        let a = model.input_gradients(&x).unwrap();
        assert!((a.attr[0] - 0.5).abs() < 1e-12);
        assert!((a.attr[1] - 0.25).abs() < 1e-12);
        assert!((a.logit - 0.35).abs() < 1e-12);
        for f in 0..2 {
            let fd = fd_attr(&model, &x, f, 1e-4);
            assert!((a.attr[f] - fd).abs() / fd < 1e-4);
        }
    }

    #[test]
    fn hand_linear_single_field_masking() {
        let model = hand_linear();
        let x = instance(&[Some(1), Some(2)]);
        // Keep only field 0: logit = bias + 0.5.
        let logit = model.forward_masked(&x, Some(&[true, false])).unwrap();
        assert!((logit - 0.6).abs() < 1e-12);
        // Absent field behaves identically to a masked one.
        let gone = instance(&[Some(1), None]);
        assert_eq!(
            model.forward(&gone).unwrap().to_bits(),
            logit.to_bits()
        );
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let mut rng = crate::rng::SplitMix64::new(8);
        for arch in ["linear", "fm", "mlp"] {
            let model = random_model(arch, 31);
            for _ in 0..20 {
                let x = random_instance(&model, &mut rng);
                let (oracle, _) = oracle_forward(&model.to_parts(), &x);
                let got = model.forward(&x).unwrap();
                assert!(
                    (got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
                    "{arch}: {got} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn all_masked_returns_bias_composition() {
        let model = random_model("mlp", 77);
        let x = instance(&[None; 5]);
        let logit = model.forward(&x).unwrap();
        let (oracle, _) = oracle_forward(&model.to_parts(), &x);
        assert_eq!(logit.to_bits(), model.bias_only_logit().to_bits());
        assert!((logit - oracle).abs() < 1e-12);
        assert!(logit.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = random_model("mlp", 3);
        let mut rng = crate::rng::SplitMix64::new(4);
        let x = random_instance(&model, &mut rng);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn masking_equals_zeroing_the_selected_row() {
        let model = random_model("mlp", 12);
        let mut rng = crate::rng::SplitMix64::new(13);
        let x = FeatureVector {
            instance_id: 1,
            fields: (0..5).map(|_| Some(rng.next_u64())).collect(),
            label: None,
        };
        for j in 0..5 {
            let mut keep = [true; 5];
            keep[j] = false;
            let masked = model.forward_masked(&x, Some(&keep)).unwrap();

            let mut parts = model.to_parts();
            let d = parts.config.embed_dim;
            let row = (x.fields[j].unwrap() % parts.config.bucket_counts[j] as u64) as usize;
            for k in 0..d {
                parts.embeddings[j][row * d + k] = 0.0;
            }
            let zeroed = Backbone::from_parts(parts).unwrap().forward(&x).unwrap();
            assert_eq!(masked.to_bits(), zeroed.to_bits(), "field {j}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_architectures() {
        let h = 1e-4;
        for (arch, seed) in [("linear", 100u64), ("fm", 200), ("mlp", 300)] {
            let model = random_model(arch, seed);
            let mut rng = crate::rng::SplitMix64::new(seed + 1);
            let mut checked = 0;
            while checked < 10 {
                let x = random_instance(&model, &mut rng);
                if !x.fields.iter().any(Option::is_some) {
                    continue;
                }
                // Skip instances sitting near a ReLU kink, where central
                // differences are invalid.
                let (_, margin) = oracle_forward(&model.to_parts(), &x);
                if margin < 50.0 * h {
                    continue;
                }
                let a = model.input_gradients(&x).unwrap();
                for f in 0..5 {
                    if x.fields[f].is_none() {
                        assert_eq!(a.attr[f], 0.0);
                        continue;
                    }
                    let fd = fd_attr(&model, &x, f, h);
                    let denom = fd.max(1e-8);
                    assert!(
                        (a.attr[f] - fd).abs() / denom < 1e-3,
                        "{arch} field {f}: {} vs {fd}",
                        a.attr[f]
                    );
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn gradients_never_mutate_parameters() {
        let model = random_model("mlp", 9);
        let before = model.checksum();
        let mut rng = crate::rng::SplitMix64::new(10);
        for _ in 0..10 {
            let x = random_instance(&model, &mut rng);
            let _ = model.input_gradients(&x).unwrap();
            let _ = model.forward(&x).unwrap();
        }
        assert_eq!(model.checksum(), before);
    }

    fn parity_data(n: usize, seed: u64) -> Vec<FeatureVector> {
        // Separable by construction: the label is the parity of field 0's
        // token, which its embedding can encode directly.
        let mut rng = crate::rng::SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let t0 = rng.next_u64() % 8;
                let t1 = rng.next_u64() % 8;
                FeatureVector {
                    instance_id: i as u64,
                    fields: vec![Some(t0), Some(t1)],
                    label: Some((t0 % 2) as u8),
                }
            })
            .collect()
    }

    fn small_trainable() -> Backbone {
        Backbone::init(
            BackboneConfig {
                num_fields: 2,
                bucket_counts: vec![8, 8],
                embed_dim: 4,
                mlp_hidden: Some(vec![8]),
                use_fm: true,
            },
            5,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn training_fits_separable_data() {
        let data = parity_data(400, 21);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 50,
            batch_size: 64,
            l2: 0.0,
            seed: 2,
        };
        let out = small_trainable().train(&data, &cfg).unwrap();
        assert!(out.model.frozen());
        assert!(out.epoch_losses.len() == 50);
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
        let scores: Vec<f64> = data
            .iter()
            .map(|x| sigmoid(out.model.forward(x).unwrap()))
            .collect();
        let labels: Vec<u8> = data.iter().map(|x| x.label.unwrap()).collect();
        let auc = crate::metrics::auc(&scores, &labels).unwrap();
        assert!(auc > 0.99, "training AUC {auc}");
    }

    #[test]
    fn zero_epochs_only_freezes() {
        let model = small_trainable();
        let before = model.checksum();
        let out = model
            .train(&parity_data(50, 3), &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            })
            .unwrap();
        assert!(out.model.frozen());
        assert_eq!(out.model.checksum(), before);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let out = small_trainable()
            .train(&parity_data(100, 4), &TrainConfig {
                learning_rate: 0.0,
                epochs: 4,
                batch_size: 32,
                l2: 0.0,
                seed: 7,
            })
            .unwrap();
        let first = out.epoch_losses[0];
        for l in &out.epoch_losses {
            assert!((l - first).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let data = parity_data(200, 6);
        let a = small_trainable().train(&data, &cfg).unwrap();
        let b = small_trainable().train(&data, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn training_rejects_frozen_and_unlabeled() {
        let mut frozen = small_trainable();
        frozen.freeze();
        assert!(matches!(
            frozen.train(&parity_data(10, 1), &TrainConfig::default()),
            Err(Error::Frozen(_))
        ));
        let mut data = parity_data(10, 1);
        data[3].label = None;
        assert!(matches!(
            small_trainable().train(&data, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_reports_divergence() {
        // An infinite learning rate drives parameters to inf/NaN after the
        // first step; the second batch's loss is then non-finite.
        let result = small_trainable().train(&parity_data(128, 9), &TrainConfig {
            learning_rate: f64::INFINITY,
            epochs: 1,
            batch_size: 32,
            l2: 0.0,
            seed: 1,
        });
        assert!(matches!(result, Err(Error::Divergence { .. })));
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let data = parity_data(200, 30);
        let out = small_trainable()
            .train(&data, &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            })
            .unwrap();
        let model = out.model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(loaded.frozen(), model.frozen());
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.checksum(), model.checksum());
        let mut rng = crate::rng::SplitMix64::new(44);
        for _ in 0..100 {
            let x = random_instance(&model, &mut rng);
            let x = FeatureVector {
                fields: x.fields.into_iter().take(2).collect(),
                ..x
            };
            assert_eq!(
                model.forward(&x).unwrap().to_bits(),
                loaded.forward(&x).unwrap().to_bits()
            );
            let ga = model.input_gradients(&x).unwrap();
            let gb = loaded.input_gradients(&x).unwrap();
            for (a, b) in ga.attr.iter().zip(&gb.attr) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let model = hand_linear();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(Backbone::load(&path), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Backbone::load(&path), Err(Error::Format(_))));

        let mut bad = bytes;
        bad[4] = 0x7f; // version byte
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Backbone::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let model = hand_linear();
        let x = instance(&[Some(1)]);
        assert!(matches!(model.forward(&x), Err(Error::Schema(_))));
        assert!(matches!(model.input_gradients(&x), Err(Error::Schema(_))));
    }
}
