//! Frozen-encoder regression head, correlation metrics and the few-shot
//! protocol.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristics::{ICScore, Scorer};
use crate::imagecore::{resize, Image};
use crate::nn::encoder::{forward_sample, Embedding, EncoderParams, EMBED_DIM, INPUT_SIDE};
use crate::nn::optim::{sgd_update, SgdConfig};
use crate::par;
use crate::rcm::{mix_seed, rng_from_seed};

/// `sigmoid(w . e + b)` on top of the embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Default for RegressionHead {
    fn default() -> Self {
        RegressionHead {
            weights: vec![0.0; EMBED_DIM],
            bias: 0.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RegressionHead {
    pub fn logit(&self, e: &Embedding) -> f64 {
        e.dot(&self.weights) + self.bias
    }

    pub fn predict(&self, e: &Embedding) -> f64 {
        sigmoid(self.logit(e))
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// Squared error `(sigmoid(z) - y)^2` and its derivative in `z`.
fn mse_logit(z: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(z);
    ((p - y) * (p - y), 2.0 * (p - y) * p * (1.0 - p))
}

/// Gradients of the single-example squared error through the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    pub d_weights: Vec<f64>,
    pub d_bias: f64,
}

pub fn head_mse_grad(head: &RegressionHead, e: &Embedding, label: f64) -> HeadGrad {
    let (loss, dz) = mse_logit(head.logit(e), label);
    HeadGrad {
        loss,
        d_embedding: head.weights.iter().map(|w| dz * w).collect(),
        d_weights: e.as_slice().iter().map(|v| dz * v).collect(),
        d_bias: dz,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 128,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            epochs: 30,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!("bad fine-tuning config {self:?}")));
        }
        Ok(())
    }
}

pub fn embed_image(encoder: &EncoderParams, img: &Image) -> Result<Embedding> {
    let input = resize(img, INPUT_SIDE, INPUT_SIDE).to_chw_rgb();
    Ok(forward_sample(encoder, &input)?.embedding)
}

pub fn embed_images(encoder: &EncoderParams, images: &[Image]) -> Result<Vec<Embedding>> {
    par::map(images, |img| embed_image(encoder, img)).into_iter().collect()
}

pub fn predict_ic(encoder: &EncoderParams, head: &RegressionHead, img: &Image) -> Result<ICScore> {
    Ok(ICScore::new(head.predict(&embed_image(encoder, img)?)))
}

/// Trained encoder plus head, usable as the `clic` scorer.
#[derive(Clone, Debug)]
pub struct ClicModel {
    pub encoder: EncoderParams,
    pub head: RegressionHead,
}

impl Scorer for ClicModel {
    fn name(&self) -> &str {
        "clic"
    }
    fn score(&self, img: &Image) -> Result<ICScore> {
        predict_ic(&self.encoder, &self.head, img)
    }
}

const STREAM_SHUFFLE: u64 = 11;
const STREAM_FEWSHOT: u64 = 12;

/// Mean-squared-error SGD on the head over precomputed embeddings.
pub fn finetune_embeddings(embeddings: &[Embedding], labels: &[f64], config: &FinetuneConfig) -> Result<RegressionHead> {
    config.validate()?;
    if embeddings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch(embeddings.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidConfig(format!("label {l} outside [0, 1]")));
    }
    let dim = embeddings[0].dim();
    // Parameters packed as [weights..., bias].
    let mut params = vec![0.0; dim + 1];
    let mut velocity = vec![0.0; dim + 1];
    let sgd = SgdConfig {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_from_seed(mix_seed(&[config.seed, STREAM_SHUFFLE, epoch as u64])));
        for chunk in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; dim + 1];
            let n = chunk.len() as f64;
            for &i in chunk {
                let e = embeddings[i].as_slice();
                let z = params[dim] + e.iter().zip(&params).map(|(a, b)| a * b).sum::<f64>();
                let dz = mse_logit(z, labels[i]).1 / n;
                for (g, v) in grad.iter_mut().zip(e) {
                    *g += dz * v;
                }
                grad[dim] += dz;
            }
            sgd_update(&mut params, &grad, &mut velocity, &sgd)?;
        }
    }
    let bias = params.pop().expect("bias slot");
    Ok(RegressionHead { weights: params, bias })
}

/// Fits a head on `(image, label)` pairs. The encoder is only read.
pub fn finetune(encoder: &EncoderParams, labeled: &[(Image, f64)], config: &FinetuneConfig) -> Result<RegressionHead> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<Image> = labeled.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<f64> = labeled.iter().map(|(_, l)| *l).collect();
    finetune_embeddings(&embed_images(encoder, &images)?, &labels, config)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: x.len(),
        });
    }
    Ok(())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: f64,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub n: usize,
    pub pcc: f64,
    pub srcc: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(scorer: &str, rows: Vec<EvalRow>) -> Result<Self> {
        let pred: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
        let label: Vec<f64> = rows.iter().map(|r| r.label).collect();
        Ok(EvalReport {
            scorer: scorer.to_string(),
            n: rows.len(),
            pcc: pearson(&pred, &label)?,
            srcc: spearman(&pred, &label)?,
            rows,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub n: usize,
    pub pcc: f64,
    pub srcc: f64,
}

/// CSV with header `n,pcc,srcc`.
pub fn few_shot_csv(rows: &[FewShotRow]) -> String {
    let mut out = String::from("n,pcc,srcc\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.n, r.pcc, r.srcc));
    }
    out
}

/// A head that predicts one constant value carries no ordering information;
/// few-shot curves record that as zero correlation instead of failing.
fn or_uninformative(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::DegenerateVariance) => Ok(0.0),
        other => other,
    }
}

/// Fine-tunes on growing subsets and evaluates on a fixed held-out split.
///
/// The pool is shuffled once with `config.seed`; the first `eval_size`
/// items are held out and run `n` trains on the first `n` of the rest, so
/// larger runs see a superset of smaller ones.
pub fn few_shot_curve(
    encoder: &EncoderParams,
    pool: &[(Image, f64)],
    ns: &[usize],
    eval_size: usize,
    config: &FinetuneConfig,
) -> Result<Vec<FewShotRow>> {
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("sample counts must be ascending".into()));
    }
    let max_n = ns.last().copied().unwrap_or(0);
    if eval_size < 2 || pool.len() < max_n + eval_size {
        return Err(Error::InsufficientData {
            needed: max_n + eval_size.max(2),
            available: pool.len(),
        });
    }
    let images: Vec<Image> = pool.iter().map(|(i, _)| i.clone()).collect();
    let embeddings = embed_images(encoder, &images)?;
    few_shot_curve_embedded(&embeddings, &pool.iter().map(|(_, l)| *l).collect::<Vec<_>>(), ns, eval_size, config)
}

/// [`few_shot_curve`] over precomputed embeddings.
pub fn few_shot_curve_embedded(
    embeddings: &[Embedding],
    labels: &[f64],
    ns: &[usize],
    eval_size: usize,
    config: &FinetuneConfig,
) -> Result<Vec<FewShotRow>> {
    let max_n = ns.last().copied().unwrap_or(0);
    if eval_size < 2 || embeddings.len() < max_n + eval_size {
        return Err(Error::InsufficientData {
            needed: max_n + eval_size.max(2),
            available: embeddings.len(),
        });
    }
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.shuffle(&mut rng_from_seed(mix_seed(&[config.seed, STREAM_FEWSHOT])));
    let (eval_idx, train_idx) = order.split_at(eval_size);
    let eval_labels: Vec<f64> = eval_idx.iter().map(|&i| labels[i]).collect();
    par::map(ns, |&n| -> Result<FewShotRow> {
        let emb: Vec<Embedding> = train_idx[..n].iter().map(|&i| embeddings[i].clone()).collect();
        let lab: Vec<f64> = train_idx[..n].iter().map(|&i| labels[i]).collect();
        let head = finetune_embeddings(&emb, &lab, config)?;
        let pred: Vec<f64> = eval_idx.iter().map(|&i| head.predict(&embeddings[i])).collect();
        Ok(FewShotRow {
            n,
            pcc: or_uninformative(pearson(&pred, &eval_labels))?,
            srcc: or_uninformative(spearman(&pred, &eval_labels))?,
        })
    })
    .into_iter()
    .collect()
}
