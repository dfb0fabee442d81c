//! Four stride-2 conv blocks, global average pooling and a two-layer
//! projection head whose output is L2-normalized.
//!
//! ```text
//! 3x64x64 -conv-> 16x32x32 -conv-> 32x16x16 -conv-> 64x8x8 -conv-> 64x4x4
//!   -> GAP(64) -> fc 64->128 -> ReLU -> fc 128->128 -> L2 normalize
//! ```
//! Every conv is 3x3, stride 2, zero padding 1, followed by ReLU.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::optim::{sgd_update, SgdConfig};
use crate::nn::tensor::Tensor;
use crate::par;
use crate::rcm::Rng;

pub const INPUT_SIDE: usize = 64;
pub const NUM_BLOCKS: usize = 4;
pub const CHANNELS: [usize; NUM_BLOCKS + 1] = [3, 16, 32, 64, 64];
pub const HIDDEN_DIM: usize = 128;
pub const EMBED_DIM: usize = 128;
const K: usize = 3;

pub const fn input_len() -> usize {
    CHANNELS[0] * INPUT_SIDE * INPUT_SIDE
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; fails on a zero or non-finite norm.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NormalizationDegenerate);
        }
        Ok(Embedding(v.iter().map(|x| x / norm).collect()))
    }

    /// Wraps a vector the caller guarantees to be unit-norm.
    pub fn from_unit(v: Vec<f64>) -> Self {
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Encoder and projection head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[out, in, 3, 3]` per block.
    pub conv_w: [Tensor; NUM_BLOCKS],
    pub conv_b: [Tensor; NUM_BLOCKS],
    /// `[HIDDEN_DIM, CHANNELS[4]]`.
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    /// `[EMBED_DIM, HIDDEN_DIM]`.
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl EncoderParams {
    /// Parameter names in declaration (serialization) order.
    pub fn names() -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..NUM_BLOCKS {
            names.push(format!("conv{b}.weight"));
            names.push(format!("conv{b}.bias"));
        }
        names.extend(["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].map(String::from));
        names
    }

    pub fn shapes() -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for b in 0..NUM_BLOCKS {
            shapes.push(vec![CHANNELS[b + 1], CHANNELS[b], K, K]);
            shapes.push(vec![CHANNELS[b + 1]]);
        }
        shapes.push(vec![HIDDEN_DIM, CHANNELS[NUM_BLOCKS]]);
        shapes.push(vec![HIDDEN_DIM]);
        shapes.push(vec![EMBED_DIM, HIDDEN_DIM]);
        shapes.push(vec![EMBED_DIM]);
        shapes
    }

    pub fn zeros() -> Self {
        let shapes = Self::shapes();
        Self::from_tensors(shapes.iter().map(|s| Tensor::zeros(s)).collect())
            .expect("declared shapes")
    }

    /// He (fan-in) normal initialization, zero biases.
    pub fn init(rng: &mut Rng) -> Self {
        let mut p = Self::zeros();
        let fill = |t: &mut Tensor, fan_in: usize, rng: &mut Rng| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        };
        for (w, &c_in) in p.conv_w.iter_mut().zip(&CHANNELS) {
            fill(w, c_in * K * K, rng);
        }
        fill(&mut p.fc1_w, CHANNELS[NUM_BLOCKS], rng);
        fill(&mut p.fc2_w, HIDDEN_DIM, rng);
        // Small positive head biases keep the first ReLU layer alive.
        for v in p.fc1_b.data_mut() {
            *v = rng.random_range(0.0..0.01);
        }
        p
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * NUM_BLOCKS + 4);
        for b in 0..NUM_BLOCKS {
            out.push(&self.conv_w[b]);
            out.push(&self.conv_b[b]);
        }
        out.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * NUM_BLOCKS + 4);
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc1_w);
        out.push(&mut self.fc1_b);
        out.push(&mut self.fc2_w);
        out.push(&mut self.fc2_b);
        out
    }

    /// Rebuilds parameters from tensors in declaration order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![shapes.len()],
                actual: vec![tensors.len()],
            });
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            t.check_shape(s)?;
        }
        let mut it = tensors.into_iter();
        let mut conv_w: Vec<Tensor> = Vec::new();
        let mut conv_b: Vec<Tensor> = Vec::new();
        for _ in 0..NUM_BLOCKS {
            conv_w.push(it.next().unwrap());
            conv_b.push(it.next().unwrap());
        }
        Ok(EncoderParams {
            conv_w: conv_w.try_into().unwrap(),
            conv_b: conv_b.try_into().unwrap(),
            fc1_w: it.next().unwrap(),
            fc1_b: it.next().unwrap(),
            fc2_w: it.next().unwrap(),
            fc2_b: it.next().unwrap(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat copy in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t.data()[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.data_mut()[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn add_assign(&mut self, other: &EncoderParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `v <- momentum*v + grad + wd*param; param <- param - lr*v` on every
    /// tensor.
    pub fn sgd_step(
        &mut self,
        grads: &EncoderParams,
        velocity: &mut EncoderParams,
        cfg: &SgdConfig,
    ) -> Result<()> {
        for ((p, g), v) in self
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(velocity.tensors_mut())
        {
            g.check_shape(p.shape())?;
            v.check_shape(p.shape())?;
            sgd_update(p.data_mut(), g.data(), v.data_mut(), cfg)?;
        }
        Ok(())
    }
}

/// Spatial side after a stride-2, pad-1, 3x3 conv.
pub const fn conv_out_side(side: usize) -> usize {
    (side - 1) / 2 + 1
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major `a`, `b`, `c`,
/// where `op` optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `[in_c * 9, os * os]` of a padded stride-2 3x3 conv.
fn im2col(input: &[f64], in_c: usize, side: usize) -> Vec<f64> {
    let os = conv_out_side(side);
    let mut cols = vec![0.0; in_c * K * K * os * os];
    for ic in 0..in_c {
        let src = &input[ic * side * side..(ic + 1) * side * side];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ic * K + ky) * K + kx) * os * os..][..os * os];
                for oy in 0..os {
                    let iy = 2 * oy + ky;
                    if iy == 0 || iy > side {
                        continue;
                    }
                    let srow = &src[(iy - 1) * side..iy * side];
                    for ox in 0..os {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > side {
                            continue;
                        }
                        row[oy * os + ox] = srow[ix - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
fn col2im(cols: &[f64], in_c: usize, side: usize, out: &mut [f64]) {
    let os = conv_out_side(side);
    for ic in 0..in_c {
        let dst = &mut out[ic * side * side..(ic + 1) * side * side];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ic * K + ky) * K + kx) * os * os..][..os * os];
                for oy in 0..os {
                    let iy = 2 * oy + ky;
                    if iy == 0 || iy > side {
                        continue;
                    }
                    let drow = &mut dst[(iy - 1) * side..iy * side];
                    for ox in 0..os {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > side {
                            continue;
                        }
                        drow[ix - 1] += row[oy * os + ox];
                    }
                }
            }
        }
    }
}

fn conv_forward(input: &[f64], in_c: usize, in_side: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out_c = b.len();
    let os = conv_out_side(in_side);
    let cols = im2col(input, in_c, in_side);
    let mut out: Vec<f64> = b
        .data()
        .iter()
        .flat_map(|&bias| std::iter::repeat_n(bias, os * os))
        .collect();
    gemm(out_c, in_c * K * K, os * os, w.data(), false, &cols, false, 1.0, &mut out);
    out
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_c: usize,
    in_side: usize,
    w: &Tensor,
    dout: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
    din: Option<&mut [f64]>,
) {
    let out_c = db.len();
    let os = conv_out_side(in_side);
    let patch = in_c * K * K;
    for (g, plane) in db.data_mut().iter_mut().zip(dout.chunks_exact(os * os)) {
        *g += plane.iter().sum::<f64>();
    }
    let cols = im2col(input, in_c, in_side);
    gemm(out_c, os * os, patch, dout, false, &cols, true, 1.0, dw.data_mut());
    if let Some(din) = din {
        let mut dcols = vec![0.0; patch * os * os];
        gemm(patch, out_c, os * os, w.data(), true, dout, false, 0.0, &mut dcols);
        col2im(&dcols, in_c, in_side, din);
    }
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// Post-ReLU output of each conv block.
    pub stages: [Vec<f64>; NUM_BLOCKS],
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub projection: Vec<f64>,
    pub embedding: Embedding,
}

impl ForwardCache {
    /// Which ReLU units are active. Finite-difference probes that change
    /// this pattern straddle a kink and are not valid gradient estimates.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.stages
            .iter()
            .flatten()
            .chain(&self.hidden)
            .map(|&v| v > 0.0)
            .collect()
    }

    /// `(channels, side)` of each stage for a square input of `side`.
    pub fn stage_dims(input_side: usize) -> [(usize, usize); NUM_BLOCKS] {
        let mut side = input_side;
        let mut dims = [(0, 0); NUM_BLOCKS];
        for (b, d) in dims.iter_mut().enumerate() {
            side = conv_out_side(side);
            *d = (CHANNELS[b + 1], side);
        }
        dims
    }
}

fn linear(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.data()
        .chunks_exact(cols)
        .zip(b.data())
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Runs the conv trunk only, on a square CHW input of any even-friendly
/// side, returning the post-activation output of every block.
pub fn conv_stages(params: &EncoderParams, input: &[f64], side: usize) -> Result<[Vec<f64>; NUM_BLOCKS]> {
    let expected = CHANNELS[0] * side * side;
    if input.len() != expected || side == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![CHANNELS[0], side, side],
            actual: vec![input.len()],
        });
    }
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(NUM_BLOCKS);
    let mut side = side;
    for b in 0..NUM_BLOCKS {
        let src = if b == 0 { input } else { &stages[b - 1] };
        let mut out = conv_forward(src, CHANNELS[b], side, &params.conv_w[b], &params.conv_b[b]);
        for v in &mut out {
            *v = v.max(0.0);
        }
        stages.push(out);
        side = conv_out_side(side);
    }
    Ok(stages.try_into().unwrap())
}

/// Forward pass for one `3x64x64` CHW input, keeping intermediates.
pub fn forward_sample(params: &EncoderParams, input: &[f64]) -> Result<ForwardCache> {
    let stages = conv_stages(params, input, INPUT_SIDE)?;
    let (c_last, s_last) = ForwardCache::stage_dims(INPUT_SIDE)[NUM_BLOCKS - 1];
    let area = (s_last * s_last) as f64;
    let pooled: Vec<f64> = stages[NUM_BLOCKS - 1]
        .chunks_exact(s_last * s_last)
        .take(c_last)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    let mut hidden = linear(&params.fc1_w, &params.fc1_b, &pooled);
    for v in &mut hidden {
        *v = v.max(0.0);
    }
    let projection = linear(&params.fc2_w, &params.fc2_b, &hidden);
    let embedding = Embedding::normalize(&projection)?;
    Ok(ForwardCache {
        input: input.to_vec(),
        stages,
        pooled,
        hidden,
        projection,
        embedding,
    })
}

/// Gradient of a scalar loss w.r.t. all parameters, given `dL/d(embedding)`.
pub fn backward_sample(params: &EncoderParams, cache: &ForwardCache, d_embed: &[f64]) -> Result<EncoderParams> {
    if d_embed.len() != EMBED_DIM {
        return Err(Error::ShapeMismatch {
            expected: vec![EMBED_DIM],
            actual: vec![d_embed.len()],
        });
    }
    let mut grads = EncoderParams::zeros();

    // Through L2 normalization: dz = (de - e (e . de)) / |z|
    let e = cache.embedding.as_slice();
    let norm = cache.projection.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e_dot = cache.embedding.dot(d_embed);
    let dz: Vec<f64> = d_embed.iter().zip(e).map(|(g, e)| (g - e * e_dot) / norm).collect();

    // fc2
    let h = &cache.hidden;
    let mut dh = vec![0.0; HIDDEN_DIM];
    {
        let w = params.fc2_w.data();
        let dw = grads.fc2_w.data_mut();
        for i in 0..EMBED_DIM {
            let row = &w[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            let drow = &mut dw[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            for j in 0..HIDDEN_DIM {
                drow[j] = dz[i] * h[j];
                dh[j] += row[j] * dz[i];
            }
        }
        grads.fc2_b.data_mut().copy_from_slice(&dz);
    }
    for (d, &hv) in dh.iter_mut().zip(h) {
        if hv <= 0.0 {
            *d = 0.0;
        }
    }

    // fc1
    let c_last = CHANNELS[NUM_BLOCKS];
    let p = &cache.pooled;
    let mut dpooled = vec![0.0; c_last];
    {
        let w = params.fc1_w.data();
        let dw = grads.fc1_w.data_mut();
        for i in 0..HIDDEN_DIM {
            for j in 0..c_last {
                dw[i * c_last + j] = dh[i] * p[j];
                dpooled[j] += w[i * c_last + j] * dh[i];
            }
        }
        grads.fc1_b.data_mut().copy_from_slice(&dh);
    }

    // global average pool
    let dims = ForwardCache::stage_dims(INPUT_SIDE);
    let (_, s_last) = dims[NUM_BLOCKS - 1];
    let area = s_last * s_last;
    let mut dact: Vec<f64> = dpooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
        .collect();

    // conv trunk
    for b in (0..NUM_BLOCKS).rev() {
        for (d, &a) in dact.iter_mut().zip(&cache.stages[b]) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let (input, in_side) = if b == 0 {
            (&cache.input, INPUT_SIDE)
        } else {
            (&cache.stages[b - 1], dims[b - 1].1)
        };
        let mut din = if b > 0 { Some(vec![0.0; input.len()]) } else { None };
        let (dw, db) = {
            let EncoderParams { conv_w, conv_b, .. } = &mut grads;
            (&mut conv_w[b], &mut conv_b[b])
        };
        conv_backward(
            input,
            CHANNELS[b],
            in_side,
            &params.conv_w[b],
            &dact,
            dw,
            db,
            din.as_deref_mut(),
        );
        if let Some(d) = din {
            dact = d;
        }
    }
    Ok(grads)
}

fn check_batch(batch: &Tensor) -> Result<usize> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != CHANNELS[0] || s[2] != INPUT_SIDE || s[3] != INPUT_SIDE {
        return Err(Error::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(0), CHANNELS[0], INPUT_SIDE, INPUT_SIDE],
            actual: s.to_vec(),
        });
    }
    Ok(s[0])
}

fn samples(batch: &Tensor) -> Vec<&[f64]> {
    batch.data().chunks_exact(input_len()).collect()
}

/// Embeds an `N x 3 x 64 x 64` batch.
pub fn encoder_forward(params: &EncoderParams, batch: &Tensor) -> Result<Vec<Embedding>> {
    check_batch(batch)?;
    par::map(&samples(batch), |x| forward_sample(params, x).map(|c| c.embedding))
        .into_iter()
        .collect()
}

/// Parameter gradients for a batch given `dL/d(embedding)` as `N x 128`.
///
/// Per-sample gradients are computed independently and summed in batch
/// order, so the result does not depend on thread scheduling.
pub fn backward(params: &EncoderParams, batch: &Tensor, upstream: &Tensor) -> Result<EncoderParams> {
    let n = check_batch(batch)?;
    upstream.check_shape(&[n, EMBED_DIM])?;
    let inputs = samples(batch);
    let per_sample = par::map_indexed(&inputs, |i, x| {
        let cache = forward_sample(params, x)?;
        backward_sample(params, &cache, &upstream.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM])
    });
    let mut total = EncoderParams::zeros();
    for g in per_sample {
        total.add_assign(&g?)?;
    }
    Ok(total)
}

/// Stacks images (already `64x64`) into a batch tensor.
pub fn batch_from_images(images: &[crate::imagecore::Image]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * input_len());
    for img in images {
        if img.width() != INPUT_SIDE || img.height() != INPUT_SIDE {
            return Err(Error::ShapeMismatch {
                expected: vec![INPUT_SIDE, INPUT_SIDE],
                actual: vec![img.height(), img.width()],
            });
        }
        data.extend(img.to_chw_rgb());
    }
    Tensor::new(vec![images.len(), CHANNELS[0], INPUT_SIDE, INPUT_SIDE], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rcm::rng_from_seed;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..n * input_len()).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 3, INPUT_SIDE, INPUT_SIDE], data).unwrap()
    }

    /// Direct definition of the padded stride-2 convolution.
    fn conv_reference(input: &[f64], in_c: usize, side: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let out_c = b.len();
        let os = conv_out_side(side);
        let mut out = vec![0.0; out_c * os * os];
        for oc in 0..out_c {
            for oy in 0..os {
                for ox in 0..os {
                    let mut acc = b.data()[oc];
                    for ic in 0..in_c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * in_c + ic) * 3 + ky) * 3 + kx]
                                    * input[(ic * side + iy as usize) * side + ix as usize];
                            }
                        }
                    }
                    out[(oc * os + oy) * os + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_for_odd_and_even_sides() {
        let mut rng = rng_from_seed(1);
        for side in [1usize, 2, 3, 5, 8, 9] {
            let (in_c, out_c) = (2, 3);
            let input: Vec<f64> = (0..in_c * side * side).map(|_| rng.random::<f64>() - 0.5).collect();
            let w = Tensor::new(vec![out_c, in_c, 3, 3], (0..out_c * in_c * 9).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
            let b = Tensor::new(vec![out_c], vec![0.1, -0.2, 0.3]).unwrap();
            let fast = conv_forward(&input, in_c, side, &w, &b);
            let slow = conv_reference(&input, in_c, side, &w, &b);
            for (a, r) in fast.iter().zip(&slow) {
                assert!((a - r).abs() < 1e-12, "side {side}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_linear_probe() {
        // The conv is linear in both weights and input, so a probe of
        // sum(dout * conv(.)) along a unit direction gives exact partials.
        let mut rng = rng_from_seed(2);
        for side in [3usize, 4, 7] {
            let (in_c, out_c) = (2, 3);
            let os = conv_out_side(side);
            let input: Vec<f64> = (0..in_c * side * side).map(|_| rng.random::<f64>() - 0.5).collect();
            let w = Tensor::new(vec![out_c, in_c, 3, 3], (0..out_c * in_c * 9).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
            let b = Tensor::zeros(&[out_c]);
            let dout: Vec<f64> = (0..out_c * os * os).map(|_| rng.random::<f64>() - 0.5).collect();
            let probe = |inp: &[f64], w: &Tensor| -> f64 {
                conv_reference(inp, in_c, side, w, &b).iter().zip(&dout).map(|(a, g)| a * g).sum()
            };
            let mut dw = Tensor::zeros(&[out_c, in_c, 3, 3]);
            let mut db = Tensor::zeros(&[out_c]);
            let mut din = vec![0.0; input.len()];
            conv_backward(&input, in_c, side, &w, &dout, &mut dw, &mut db, Some(&mut din));
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp.data_mut()[i] += 1.0;
                let expect = probe(&input, &wp) - probe(&input, &w);
                assert!((dw.data()[i] - expect).abs() < 1e-10);
            }
            for i in 0..input.len() {
                let mut xp = input.clone();
                xp[i] += 1.0;
                let expect = probe(&xp, &w) - probe(&input, &w);
                assert!((din[i] - expect).abs() < 1e-10);
            }
            for o in 0..out_c {
                let expect: f64 = dout[o * os * os..(o + 1) * os * os].iter().sum();
                assert!((db.data()[o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_and_unit_norm() {
        let params = EncoderParams::init(&mut rng_from_seed(0));
        let out = encoder_forward(&params, &random_batch(4, 1)).unwrap();
        assert_eq!(out.len(), 4);
        for e in &out {
            assert_eq!(e.dim(), EMBED_DIM);
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = EncoderParams::init(&mut rng_from_seed(0));
        let mut batch = random_batch(1, 5).into_data();
        batch.extend_from_within(..);
        let batch = Tensor::new(vec![2, 3, 64, 64], batch).unwrap();
        let out = encoder_forward(&params, &batch).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zero_params_are_degenerate() {
        let params = EncoderParams::zeros();
        assert!(matches!(
            encoder_forward(&params, &random_batch(1, 1)),
            Err(Error::NormalizationDegenerate)
        ));
    }

    #[test]
    fn bad_batch_shape() {
        let params = EncoderParams::zeros();
        let t = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(matches!(encoder_forward(&params, &t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_shapes_and_linearity() {
        let params = EncoderParams::init(&mut rng_from_seed(2));
        let batch = random_batch(2, 3);
        let zero = Tensor::zeros(&[2, EMBED_DIM]);
        let g = backward(&params, &batch, &zero).unwrap();
        for (gt, pt) in g.tensors().iter().zip(params.tensors()) {
            assert_eq!(gt.shape(), pt.shape());
        }
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    /// Loss `w . e(x)` with a fixed random `w`; checked against central
    /// differences on a spread of parameters from every tensor.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(7);
        let params = EncoderParams::init(&mut rng);
        let batch = random_batch(1, 8);
        let w: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random::<f64>() - 0.5).collect();
        let loss = |p: &EncoderParams| encoder_forward(p, &batch).unwrap()[0].dot(&w);
        let upstream = Tensor::new(vec![1, EMBED_DIM], w.clone()).unwrap();
        let grads = backward(&params, &batch, &upstream).unwrap().to_flat();
        let eps = 1e-3;
        let pattern = |p: &EncoderParams| forward_sample(p, batch.data()).unwrap().relu_pattern();
        let mut offset = 0;
        let mut checked = 0;
        for t in params.tensors() {
            for k in 0..8.min(t.len()) {
                let i = offset + (k * 7919) % t.len();
                let mut plus = params.clone();
                plus.set_flat(i, params.get_flat(i) + eps);
                let mut minus = params.clone();
                minus.set_flat(i, params.get_flat(i) - eps);
                if pattern(&plus) != pattern(&minus) {
                    continue;
                }
                checked += 1;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let analytic = grads[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "param {i}: analytic {analytic} numeric {numeric}"
                );
            }
            offset += t.len();
        }
        assert!(checked >= 48, "only {checked} kink-free probes");
    }
}
