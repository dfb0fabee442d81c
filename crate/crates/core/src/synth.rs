//! Procedural test corpus with known complexity labels.
//!
//! Four families: flat colour, quantized noise, stripes and checkerboards.
//! Each image's label is its normalized Shannon entropy, so corpora carry
//! ground truth without any external dataset.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristics::shannon_entropy;
use crate::imagecore::{save_png, to_grayscale, Image};
use crate::manifest::{Manifest, ManifestEntry};
use crate::rcm::{mix_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Constant,
    Noise,
    Stripe,
    Checkerboard,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Constant,
        SynthKind::Noise,
        SynthKind::Stripe,
        SynthKind::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Constant => "constant",
            SynthKind::Noise => "noise",
            SynthKind::Stripe => "stripe",
            SynthKind::Checkerboard => "checkerboard",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: Image,
    pub kind: SynthKind,
    pub label: f64,
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0..=255u32) as f64 / 255.0)
}

fn palette(rng: &mut Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| random_color(rng)).collect()
}

pub fn generate(kind: SynthKind, size: usize, rng: &mut Rng) -> SynthImage {
    let image = match kind {
        SynthKind::Constant => {
            let c = random_color(rng);
            Image::from_fn(size, size, 3, |_, _, ch| c[ch])
        }
        SynthKind::Noise => {
            // 2..=256 intensity levels, log-uniform.
            let levels = 2f64.powf(rng.random_range(1.0..=8.0)).round() as u32;
            let mut values = Vec::with_capacity(size * size);
            for _ in 0..size * size {
                let l = rng.random_range(0..levels);
                values.push(l as f64 / (levels - 1) as f64);
            }
            Image::from_fn(size, size, 1, |x, y, _| values[y * size + x])
        }
        SynthKind::Stripe => {
            let colors = rng.random_range(2..=8usize);
            let pal = palette(rng, colors);
            let width = rng.random_range(1..=(size / 4).max(1));
            let vertical = rng.random_bool(0.5);
            Image::from_fn(size, size, 3, |x, y, ch| {
                let t = if vertical { x } else { y };
                pal[(t / width) % colors][ch]
            })
        }
        SynthKind::Checkerboard => {
            let pal = palette(rng, 2);
            let cell = rng.random_range(1..=(size / 4).max(1));
            Image::from_fn(size, size, 3, |x, y, ch| pal[(x / cell + y / cell) % 2][ch])
        }
    };
    let label = shannon_entropy(&to_grayscale(&image)).value();
    SynthImage { image, kind, label }
}

/// `n` images cycling through the four families; image `i` draws from its
/// own seeded stream.
pub fn corpus(n: usize, size: usize, seed: u64) -> Vec<SynthImage> {
    (0..n)
        .map(|i| {
            let kind = SynthKind::ALL[i % SynthKind::ALL.len()];
            generate(kind, size, &mut rng_from_seed(mix_seed(&[seed, i as u64])))
        })
        .collect()
}

/// Writes a corpus as PNGs plus `manifest.jsonl` (labels in `score`).
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    if size < 8 {
        return Err(Error::InvalidConfig(format!("synthetic image size {size} below 8")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, s) in corpus(n, size, seed).into_iter().enumerate() {
        let id = format!("synth_{i:05}_{}", s.kind.name());
        let path = dir.join(format!("{id}.png"));
        save_png(&s.image, &path)?;
        // Entropy bins by round(v * 255), the same quantization the PNG
        // applies, so the label matches what a reader decodes.
        manifest
            .entries
            .push(ManifestEntry::new(path).with_score(s.label).with_id(id));
    }
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
