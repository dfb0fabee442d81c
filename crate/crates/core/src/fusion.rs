//! Injecting frozen-encoder feature maps into a host network's feature maps.
//!
//! The encoder side is read-only: maps are plain values and nothing here
//! produces gradients for it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imagecore::{resize, Image};
use crate::nn::encoder::{conv_stages, ForwardCache, NUM_BLOCKS};
use crate::nn::{read_tensors, write_tensors, EncoderParams, Tensor, INPUT_SIDE};

pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;

/// Channel-major activations, `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("feature map shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                actual: t.shape().to_vec(),
            }),
        }
    }

    /// Single-tensor checkpoint-format blob. Values are stored as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &[("feature_map", &self.to_tensor())])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_tensors(path)?;
        match tensors.as_slice() {
            [(_, t)] => Self::from_tensor(t),
            _ => Err(Error::Checkpoint(format!(
                "expected one tensor in feature-map blob, found {}",
                tensors.len()
            ))),
        }
    }

    /// Corner-aligned bilinear resize of each channel, without clamping.
    fn resized(&self, height: usize, width: usize) -> FeatureMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let pos = |i: usize, src: usize, dst: usize| {
            if dst <= 1 || src <= 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            }
        };
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for oy in 0..height {
                let sy = pos(oy, self.height, height);
                let y0 = (sy.floor() as usize).min(self.height - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let fy = sy - y0 as f64;
                for ox in 0..width {
                    let sx = pos(ox, self.width, width);
                    let x0 = (sx.floor() as usize).min(self.width - 1);
                    let x1 = (x0 + 1).min(self.width - 1);
                    let fx = sx - x0 as f64;
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        FeatureMap {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Maps to `channels` outputs; a mismatched count becomes the channel
    /// mean copied into every output channel.
    fn project(&self, channels: usize) -> FeatureMap {
        if channels == self.channels {
            return self.clone();
        }
        let area = self.height * self.width;
        let mut mean = vec![0.0; area];
        for c in 0..self.channels {
            for (m, v) in mean.iter_mut().zip(&self.data[c * area..(c + 1) * area]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.channels as f64;
        }
        FeatureMap {
            channels,
            height: self.height,
            width: self.width,
            data: mean.repeat(channels),
        }
    }
}

/// Post-activation outputs of the four conv blocks for `img` resized to the
/// encoder input size.
pub fn extract_stage_maps(encoder: &EncoderParams, img: &Image) -> Result<Vec<FeatureMap>> {
    let input = resize(img, INPUT_SIDE, INPUT_SIDE).to_chw_rgb();
    let stages = conv_stages(encoder, &input, INPUT_SIDE)?;
    let dims = ForwardCache::stage_dims(INPUT_SIDE);
    debug_assert_eq!(dims.len(), NUM_BLOCKS);
    stages
        .into_iter()
        .zip(dims)
        .map(|(data, (c, side))| FeatureMap::new(c, side, side, data))
        .collect()
}

/// `task + weight * align(ic)`, where `align` resizes `ic` to the task's
/// spatial size and matches its channel count.
pub fn fuse(task: &FeatureMap, ic: &FeatureMap, weight: f64) -> Result<FeatureMap> {
    if !weight.is_finite() {
        return Err(Error::InvalidConfig(format!("fusion weight {weight} is not finite")));
    }
    let aligned = ic.resized(task.height, task.width).project(task.channels);
    let data = task
        .data
        .iter()
        .zip(&aligned.data)
        .map(|(t, a)| t + weight * a)
        .collect();
    Ok(FeatureMap {
        data,
        ..task.clone()
    })
}
