//! Training-free complexity scorers.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{to_grayscale, GrayImage, Image};

/// Image complexity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ICScore(f64);

impl ICScore {
    /// Clamps into `[0, 1]`; NaN and negative zero map to 0.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            ICScore(0.0)
        } else {
            ICScore(value.clamp(0.0, 1.0) + 0.0)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Normalized Shannon entropy of the 256-level intensity histogram.
pub fn shannon_entropy(img: &GrayImage) -> ICScore {
    let mut hist = [0usize; 256];
    for &v in img.pixels() {
        hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
    }
    let n = img.pixels().len() as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum();
    ICScore::new(h / 8.0)
}

/// Sobel magnitude at interior pixel `(x, y)`.
fn sobel(img: &GrayImage, x: usize, y: usize) -> f64 {
    let p = |dx: isize, dy: isize| img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
    let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
    let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
    (gx * gx + gy * gy).sqrt()
}

/// Fraction of interior pixels whose Sobel magnitude exceeds a tenth of the
/// image maximum.
pub fn edge_density(img: &GrayImage) -> Result<ICScore> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            short_side: w.min(h),
            required: 3,
        });
    }
    let mut mags = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            mags.push(sobel(img, x, y));
        }
    }
    let max = mags.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(ICScore::new(0.0));
    }
    let threshold = 0.1 * max;
    let edges = mags.iter().filter(|&&g| g > threshold).count();
    Ok(ICScore::new(edges as f64 / mags.len() as f64))
}

pub const DEFLATE_LEVEL: u32 = 6;

/// Deflated size of the raw 8-bit samples over their uncompressed size.
pub fn compression_ratio(img: &Image) -> ICScore {
    let raw = img.to_u8();
    let mut enc = DeflateEncoder::new(Vec::with_capacity(raw.len() / 2), Compression::new(DEFLATE_LEVEL));
    enc.write_all(&raw).expect("in-memory write");
    let compressed = enc.finish().expect("in-memory write");
    ICScore::new(compressed.len() as f64 / raw.len() as f64)
}

/// Anything that maps an image to a complexity score.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, img: &Image) -> Result<ICScore>;
}

pub struct EntropyScorer;
pub struct EdgeScorer;
pub struct CompressionScorer;

impl Scorer for EntropyScorer {
    fn name(&self) -> &str {
        "entropy"
    }
    fn score(&self, img: &Image) -> Result<ICScore> {
        Ok(shannon_entropy(&to_grayscale(img)))
    }
}

impl Scorer for EdgeScorer {
    fn name(&self) -> &str {
        "edge"
    }
    fn score(&self, img: &Image) -> Result<ICScore> {
        edge_density(&to_grayscale(img))
    }
}

impl Scorer for CompressionScorer {
    fn name(&self) -> &str {
        "compress"
    }
    fn score(&self, img: &Image) -> Result<ICScore> {
        Ok(compression_ratio(img))
    }
}

/// Every name the registry understands. `clic` needs a trained model and is
/// resolved by the caller.
pub const SCORER_NAMES: [&str; 4] = ["entropy", "edge", "compress", "clic"];

pub fn unknown_scorer(name: &str) -> Error {
    Error::UnknownScorer {
        name: name.to_string(),
        available: SCORER_NAMES.join(", "),
    }
}

/// Looks up a training-free scorer by name.
pub fn heuristic_scorer(name: &str) -> Result<Box<dyn Scorer>> {
    match name {
        "entropy" => Ok(Box::new(EntropyScorer)),
        "edge" => Ok(Box::new(EdgeScorer)),
        "compress" => Ok(Box::new(CompressionScorer)),
        "clic" => Err(Error::InvalidConfig(
            "scorer \"clic\" requires an encoder checkpoint and a regression head".into(),
        )),
        other => Err(unknown_scorer(other)),
    }
}
