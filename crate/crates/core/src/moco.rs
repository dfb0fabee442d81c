//! Momentum-contrast training over Random Crop and Mix positives.
//!
//! Each source image is its own class. Its mixed samples are queries for
//! the trainable encoder; one independently augmented full view is the key
//! for the momentum encoder. Every query is scored against the key and a
//! FIFO queue of past keys with InfoNCE, and the per-query losses are
//! averaged.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{resize, Image};
use crate::nn::checkpoint::{named_params, params_from_named, read_tensors, write_tensors};
use crate::nn::encoder::{backward_sample, forward_sample, Embedding, EncoderParams, EMBED_DIM, INPUT_SIDE};
use crate::nn::optim::SgdConfig;
use crate::nn::tensor::Tensor;
use crate::par;
use crate::rcm::{mix_seed, rcm_positives, rng_from_seed, transform_crop, Rng};

/// Fixed-capacity ring buffer of key embeddings used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    store: Vec<f64>,
    ptr: usize,
}

impl NegativeQueue {
    /// Queue pre-filled with random unit vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut store = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let e = Embedding::normalize(&v).expect("gaussian draw is nonzero");
            store.extend(e.into_vec());
        }
        NegativeQueue {
            capacity,
            dim,
            store,
            ptr: 0,
        }
    }

    pub fn from_keys(keys: &[Embedding]) -> Self {
        let dim = keys.first().map_or(EMBED_DIM, |k| k.dim());
        NegativeQueue {
            capacity: keys.len(),
            dim,
            store: keys.iter().flat_map(|k| k.as_slice().iter().copied()).collect(),
            ptr: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Next slot to be overwritten.
    pub fn ptr(&self) -> usize {
        self.ptr
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.store[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> impl Iterator<Item = &[f64]> {
        self.store.chunks_exact(self.dim.max(1))
    }

    /// Writes `keys` at `ptr..ptr+B` (mod capacity) and advances `ptr`.
    pub fn enqueue(&mut self, keys: &[Embedding]) -> Result<()> {
        let b = keys.len();
        if b == 0 || b > self.capacity || !self.capacity.is_multiple_of(b) {
            return Err(Error::BatchSizeMismatch {
                batch: b,
                capacity: self.capacity,
            });
        }
        for (j, k) in keys.iter().enumerate() {
            if k.dim() != self.dim {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.dim],
                    actual: vec![k.dim()],
                });
            }
            let slot = (self.ptr + j) % self.capacity;
            self.store[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k.as_slice());
        }
        self.ptr = (self.ptr + b) % self.capacity;
        Ok(())
    }

    /// Mean of all stored keys; `q . mean` is the mean query-negative
    /// similarity.
    pub fn mean_key(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for k in self.keys() {
            for (m, v) in mean.iter_mut().zip(k) {
                *m += v;
            }
        }
        let n = self.capacity.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.capacity, self.dim], self.store.clone()).expect("queue shape")
    }

    fn from_tensor(t: &Tensor, ptr: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || ptr >= s[0].max(1) {
            return Err(Error::Checkpoint("bad queue tensor".into()));
        }
        Ok(NegativeQueue {
            capacity: s[0],
            dim: s[1],
            store: t.data().to_vec(),
            ptr,
        })
    }
}

/// Loss value and its gradient with respect to the query embedding.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `-log softmax` of the positive logit among `[q.k, q.n_1, ..., q.n_K] / tau`.
///
/// Keys and queue entries are constants; only `q` receives a gradient.
pub fn info_nce(q: &Embedding, k_pos: &Embedding, queue: &NegativeQueue, tau: f64) -> Result<LossGrad> {
    if queue.capacity() == 0 {
        return Err(Error::EmptyQueue);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if q.dim() != queue.dim() || k_pos.dim() != queue.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![queue.dim()],
            actual: vec![q.dim(), k_pos.dim()],
        });
    }
    let pos = q.dot(k_pos.as_slice()) / tau;
    let negs: Vec<f64> = queue.keys().map(|n| q.dot(n) / tau).collect();
    let max = negs.iter().copied().fold(pos, f64::max);
    let pos_w = (pos - max).exp();
    let neg_w: Vec<f64> = negs.iter().map(|l| (l - max).exp()).collect();
    let z = pos_w + neg_w.iter().sum::<f64>();
    let loss = max + z.ln() - pos;

    let mut grad: Vec<f64> = k_pos.as_slice().iter().map(|k| (pos_w / z - 1.0) * k).collect();
    for (w, n) in neg_w.iter().zip(queue.keys()) {
        let p = w / z;
        for (g, v) in grad.iter_mut().zip(n) {
            *g += p * v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    Ok(LossGrad { loss, grad })
}

/// Mean InfoNCE over several positive queries sharing one key.
///
/// The returned gradients are per query and already include the `1/P`
/// factor of the mean.
pub fn multi_positive_loss(
    qs: &[Embedding],
    k_pos: &Embedding,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if qs.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let p = qs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(qs.len());
    for q in qs {
        let LossGrad { loss, mut grad } = info_nce(q, k_pos, queue, tau)?;
        total += loss;
        grad.iter_mut().for_each(|g| *g /= p);
        grads.push(grad);
    }
    Ok((total / p, grads))
}

/// `key <- m * key + (1 - m) * query` for every parameter.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1], got {m}")));
    }
    for (k, q) in key.tensors_mut().into_iter().zip(query.tensors()) {
        q.check_shape(k.shape())?;
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// How the key view of an image is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyView {
    /// The whole image, resized and randomly transformed.
    #[default]
    Full,
    /// One mixed sample from an independent crop-and-mix draw.
    Rcm,
}

/// Initial queue contents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueInit {
    /// Random unit vectors.
    Random,
    /// Key-encoder embeddings of the training images, computed before the
    /// first step.
    #[default]
    Keys,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_points: Vec<f64>,
    pub lr_drop_factor: f64,
    /// Key-encoder EMA coefficient.
    pub momentum_m: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub c: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub key_view: KeyView,
    pub queue_init: QueueInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 0.03,
            epochs: 30,
            lr_drop_points: vec![0.6, 0.8],
            lr_drop_factor: 0.1,
            momentum_m: 0.999,
            temperature: 0.2,
            queue_size: 4096,
            c: 2,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            key_view: KeyView::Full,
            queue_init: QueueInit::Keys,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 200 epochs, drops at epochs 120 and 160.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 200,
            queue_size: 65536,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.momentum_m > 0.0 && self.momentum_m < 1.0) {
            return bad(format!("momentum_m must lie in (0, 1), got {}", self.momentum_m));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || !self.queue_size.is_multiple_of(self.batch_size) {
            return bad(format!(
                "queue_size {} must be a positive multiple of batch_size {}",
                self.queue_size, self.batch_size
            ));
        }
        if self.c < 2 {
            return Err(Error::InvalidC(self.c));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &frac in &self.lr_drop_points {
            let at = (frac * self.epochs as f64 - 1e-9).ceil().max(0.0) as usize;
            if epoch >= at {
                lr *= self.lr_drop_factor;
            }
        }
        lr
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
        }
    }
}

// Seed stream tags.
const STREAM_INIT: u64 = 1;
const STREAM_QUEUE: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_EPOCH: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_WARMUP: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub queue: NegativeQueue,
    pub velocity: EncoderParams,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    /// Random query encoder, key encoder copied from it, random queue.
    pub fn new(config: &TrainConfig) -> Self {
        let query = EncoderParams::init(&mut rng_from_seed(mix_seed(&[config.seed, STREAM_INIT])));
        let queue = NegativeQueue::random(
            config.queue_size,
            EMBED_DIM,
            &mut rng_from_seed(mix_seed(&[config.seed, STREAM_QUEUE])),
        );
        TrainState {
            key: query.clone(),
            query,
            queue,
            velocity: EncoderParams::zeros(),
            epoch: 0,
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

/// Overwrites the whole queue with key embeddings of `images` (cycled in a
/// seeded order) and resets its pointer.
pub fn warm_queue(state: &mut TrainState, images: &[Image], config: &TrainConfig) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = state.queue.capacity();
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng_from_seed(mix_seed(&[config.seed, STREAM_WARMUP])));
    let key = &state.key;
    let keys = par::map_range(k, |slot| -> Result<Embedding> {
        let img = &images[order[slot % order.len()]];
        let mut rng = rng_from_seed(mix_seed(&[config.seed, STREAM_WARMUP, slot as u64]));
        let (_, k_input) = make_views(img, config, &mut rng)?;
        Ok(forward_sample(key, &k_input)?.embedding)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    state.queue = NegativeQueue::from_keys(&keys);
    Ok(())
}

/// Encoder-ready CHW input.
fn to_input(img: &Image) -> Vec<f64> {
    resize(img, INPUT_SIDE, INPUT_SIDE).to_chw_rgb()
}

/// Query inputs (one per mixed sample) and the key input for one image.
pub fn make_views(img: &Image, config: &TrainConfig, rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let positives = rcm_positives(img, config.c, rng)?;
    let queries = positives.iter().map(|s| to_input(&s.canvas)).collect();
    let key = match config.key_view {
        KeyView::Full => {
            let full = resize(img, INPUT_SIDE, INPUT_SIDE);
            transform_crop(&full, rng).to_chw_rgb()
        }
        KeyView::Rcm => {
            let draw = rcm_positives(img, config.c, rng)?;
            let pick = rng.random_range(0..draw.len());
            to_input(&draw[pick].canvas)
        }
    };
    Ok((queries, key))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    /// Mean cosine between each query and its key.
    pub positive_similarity: f64,
    /// Mean cosine between each query and the queued negatives.
    pub negative_similarity: f64,
}

struct ImageStep {
    loss: f64,
    grads: EncoderParams,
    key: Embedding,
    pos_sim: f64,
    neg_sim: f64,
}

/// One optimizer step on a batch of source images.
///
/// Per-image work is independent and may run in parallel; gradients are
/// reduced in batch order so the step is deterministic.
pub fn train_step(state: &mut TrainState, batch: &[Image], config: &TrainConfig, lr: f64) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let b = batch.len();
    if !state.queue.capacity().is_multiple_of(b) {
        return Err(Error::BatchSizeMismatch {
            batch: b,
            capacity: state.queue.capacity(),
        });
    }
    let mean_neg = state.queue.mean_key();
    let step = state.step;
    let (query, key, queue) = (&state.query, &state.key, &state.queue);
    let per_image = par::map_indexed(batch, |i, img| -> Result<ImageStep> {
        let mut rng = rng_from_seed(mix_seed(&[config.seed, STREAM_STEP, step, i as u64]));
        let (q_inputs, k_input) = make_views(img, config, &mut rng)?;
        let k = forward_sample(key, &k_input)?.embedding;
        let caches = q_inputs
            .iter()
            .map(|x| forward_sample(query, x))
            .collect::<Result<Vec<_>>>()?;
        let qs: Vec<Embedding> = caches.iter().map(|c| c.embedding.clone()).collect();
        let (loss, dq) = multi_positive_loss(&qs, &k, queue, config.temperature)?;
        let mut grads = EncoderParams::zeros();
        for (cache, g) in caches.iter().zip(&dq) {
            let scaled: Vec<f64> = g.iter().map(|v| v / b as f64).collect();
            grads.add_assign(&backward_sample(query, cache, &scaled)?)?;
        }
        let p = qs.len() as f64;
        Ok(ImageStep {
            loss,
            grads,
            pos_sim: qs.iter().map(|q| q.dot(k.as_slice())).sum::<f64>() / p,
            neg_sim: qs.iter().map(|q| q.dot(&mean_neg)).sum::<f64>() / p,
            key: k,
        })
    });

    let mut total = EncoderParams::zeros();
    let mut keys = Vec::with_capacity(b);
    let mut stats = StepStats::default();
    for r in per_image {
        let r = r?;
        total.add_assign(&r.grads)?;
        stats.loss += r.loss / b as f64;
        stats.positive_similarity += r.pos_sim / b as f64;
        stats.negative_similarity += r.neg_sim / b as f64;
        keys.push(r.key);
    }
    state.query.sgd_step(&total, &mut state.velocity, &config.sgd(lr))?;
    momentum_update(&mut state.key, &state.query, config.momentum_m)?;
    state.queue.enqueue(&keys)?;
    state.step += 1;
    Ok(stats)
}

/// Runs one epoch over `images` (shuffled, last partial batch dropped) and
/// returns the mean step loss.
pub fn train_epoch(state: &mut TrainState, images: &[Image], config: &TrainConfig) -> Result<f64> {
    let b = config.batch_size;
    if images.len() < b {
        return Err(Error::InsufficientData {
            needed: b,
            available: images.len(),
        });
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng_from_seed(mix_seed(&[config.seed, STREAM_EPOCH, state.epoch as u64])));
    let lr = config.learning_rate(state.epoch);
    let mut losses = Vec::new();
    for chunk in order.chunks_exact(b) {
        let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
        let stats = train_step(state, &batch, config, lr)?;
        log::debug!("epoch {} step {} loss {:.4}", state.epoch, state.step, stats.loss);
        losses.push(stats.loss);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    state.epoch += 1;
    state.loss_history.push(mean);
    Ok(mean)
}

/// Sidecar written next to the tensor checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub queue_ptr: usize,
    pub config: TrainConfig,
    pub loss_history: Vec<f64>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.clic";
pub const CHECKPOINT_META_FILE: &str = "checkpoint.json";

pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named = named_params("query.", &state.query);
    named.extend(named_params("key.", &state.key));
    named.extend(named_params("velocity.", &state.velocity));
    named.push(("queue".to_string(), state.queue.as_tensor()));
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    write_tensors(&tmp, &refs)?;
    let target = dir.join(CHECKPOINT_FILE);
    std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    let meta = CheckpointMeta {
        epoch: state.epoch,
        step: state.step,
        queue_ptr: state.queue.ptr(),
        config: config.clone(),
        loss_history: state.loss_history.clone(),
    };
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))
}

/// Restores state from a checkpoint directory. Parameters come back
/// rounded to `f32`.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let named = read_tensors(&dir.join(CHECKPOINT_FILE))?;
    let queue_t = named
        .iter()
        .find(|(n, _)| n == "queue")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint("missing queue".into()))?;
    let state = TrainState {
        query: params_from_named(&named, "query.")?,
        key: params_from_named(&named, "key.")?,
        velocity: params_from_named(&named, "velocity.")?,
        queue: NegativeQueue::from_tensor(queue_t, meta.queue_ptr)?,
        epoch: meta.epoch,
        step: meta.step,
        loss_history: meta.loss_history.clone(),
    };
    Ok((state, meta))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub loss_history: Vec<f64>,
    pub state: TrainState,
}

/// Trains for `config.epochs` epochs.
///
/// With `checkpoint_dir`, state is saved after every epoch, and if a
/// checkpoint is already there training resumes from it.
pub fn train(config: &TrainConfig, images: &[Image], checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(img) = images.iter().find(|i| i.short_side() < 4 * config.c) {
        return Err(Error::ImageTooSmall {
            short_side: img.short_side(),
            required: 4 * config.c,
        });
    }
    let mut state = match checkpoint_dir {
        Some(dir) if dir.join(CHECKPOINT_META_FILE).exists() => {
            let (state, meta) = load_checkpoint(dir)?;
            if meta.config != *config {
                log::warn!("resuming from {} with a different configuration", dir.display());
            }
            state
        }
        _ => {
            let mut state = TrainState::new(config);
            if config.queue_init == QueueInit::Keys {
                warm_queue(&mut state, images, config)?;
            }
            state
        }
    };
    while state.epoch < config.epochs {
        let loss = train_epoch(&mut state, images, config)?;
        log::info!("epoch {}/{} mean loss {:.4}", state.epoch, config.epochs, loss);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(dir, &state, config)?;
        }
    }
    Ok(TrainOutcome {
        params: state.query.clone(),
        loss_history: state.loss_history.clone(),
        state,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SimilarityReport {
    pub positive: f64,
    pub negative: f64,
}

/// Mean query-key and query-queue cosine similarity over `images`, using a
/// fresh augmentation draw.
pub fn similarity_report(state: &TrainState, images: &[Image], config: &TrainConfig) -> Result<SimilarityReport> {
    let mean_neg = state.queue.mean_key();
    let per_image = par::map_indexed(images, |i, img| -> Result<(f64, f64)> {
        let mut rng = rng_from_seed(mix_seed(&[config.seed, STREAM_EVAL, i as u64]));
        let (q_inputs, k_input) = make_views(img, config, &mut rng)?;
        let k = forward_sample(&state.key, &k_input)?.embedding;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for x in &q_inputs {
            let q = forward_sample(&state.query, x)?.embedding;
            pos += q.dot(k.as_slice());
            neg += q.dot(&mean_neg);
        }
        let p = q_inputs.len() as f64;
        Ok((pos / p, neg / p))
    });
    let n = images.len().max(1) as f64;
    let mut report = SimilarityReport {
        positive: 0.0,
        negative: 0.0,
    };
    for r in per_image {
        let (p, q) = r?;
        report.positive += p / n;
        report.negative += q / n;
    }
    Ok(report)
}

/// Default location of the checkpoint inside a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
