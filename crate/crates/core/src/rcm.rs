//! Random Crop and Mix.
//!
//! An image with short side `L` is cropped at three scales: `c` crops of
//! side `L/c`, `2c` of side `L/(2c)` and `4c` of side `L/(4c)`, for `7c`
//! crops in total. Crops of one scale are paired at random and each pair
//! `(a, b)` becomes a 2x2 canvas `[a, b; T(a), T(b)]` where `T` is a random
//! photometric/geometric transform. An odd leftover crop is paired with
//! itself, so a level with `n` crops yields `ceil(n / 2)` samples.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::{crop, load_image, save_png, to_grayscale, Image, Rect};
use crate::manifest::{Manifest, ManifestEntry};
use crate::par;

/// Seeded generator used by every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-entry seed for dataset-level fan-out.
pub fn entry_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Mixes several stream identifiers into one seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub const NUM_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleLevel {
    pub side: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub short_side: usize,
    pub c: usize,
    pub levels: [ScaleLevel; NUM_LEVELS],
}

impl CropPlan {
    pub fn total_crops(&self) -> usize {
        self.levels.iter().map(|l| l.count).sum()
    }

    /// Number of mixed samples this plan produces.
    pub fn total_samples(&self) -> usize {
        self.levels.iter().map(|l| l.count.div_ceil(2)).sum()
    }
}

/// Mixed samples produced per image for a given `c`: `ceil(c/2) + c + 2c`.
pub fn samples_per_image(c: usize) -> usize {
    c.div_ceil(2) + c + 2 * c
}

pub fn plan_crops(height: usize, width: usize, c: usize) -> Result<CropPlan> {
    if c < 2 {
        return Err(Error::InvalidC(c));
    }
    let short_side = height.min(width);
    if short_side < 4 * c {
        return Err(Error::ImageTooSmall {
            short_side,
            required: 4 * c,
        });
    }
    let levels = [1, 2, 4].map(|k| ScaleLevel {
        side: short_side / (k * c),
        count: k * c,
    });
    Ok(CropPlan {
        short_side,
        c,
        levels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub level: usize,
    pub rect: Rect,
    pub image: Image,
}

/// Draws `7c` square crops at uniformly random valid offsets.
pub fn random_crop_set(img: &Image, plan: &CropPlan, rng: &mut Rng) -> Result<Vec<Crop>> {
    if plan.short_side != img.short_side() {
        return Err(Error::InvalidConfig(format!(
            "crop plan built for short side {} applied to {}x{} image",
            plan.short_side,
            img.width(),
            img.height()
        )));
    }
    let mut crops = Vec::with_capacity(plan.total_crops());
    for (level, lv) in plan.levels.iter().enumerate() {
        for _ in 0..lv.count {
            let x = rng.random_range(0..=img.width() - lv.side);
            let y = rng.random_range(0..=img.height() - lv.side);
            let rect = Rect::new(x, y, lv.side);
            crops.push(Crop {
                level,
                rect,
                image: crop(img, rect)?,
            });
        }
    }
    Ok(crops)
}

/// A concrete draw of the tile transform.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub flip: bool,
    /// Clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Per-channel `(gain, offset)`: `v' = clamp(gain * v + offset, 0, 1)`.
    pub jitter: Option<[(f64, f64); 3]>,
    pub grayscale: bool,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            flip: false,
            quarter_turns: 0,
            jitter: None,
            grayscale: false,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let quarter_turns = if rng.random_bool(0.5) {
            rng.random_range(1..=3u8)
        } else {
            0
        };
        let jitter = if rng.random_bool(0.5) {
            let mut j = [(1.0, 0.0); 3];
            for slot in &mut j {
                *slot = (rng.random_range(0.6..=1.4), rng.random_range(-0.2..=0.2));
            }
            Some(j)
        } else {
            None
        };
        let grayscale = rng.random_bool(0.2);
        TransformParams {
            flip,
            quarter_turns,
            jitter,
            grayscale,
        }
    }

    pub fn apply(&self, tile: &Image) -> Image {
        let side = tile.width();
        assert_eq!(side, tile.height(), "transform expects a square tile");
        let ch = tile.channels();
        let mut out = tile.clone();
        if self.flip {
            out = Image::from_fn(side, side, ch, |x, y, c| tile.get(side - 1 - x, y, c));
        }
        for _ in 0..self.quarter_turns % 4 {
            let src = out;
            out = Image::from_fn(side, side, ch, |x, y, c| src.get(y, side - 1 - x, c));
        }
        if let Some(jitter) = &self.jitter {
            for y in 0..side {
                for x in 0..side {
                    for (c, &(a, b)) in jitter.iter().enumerate().take(ch) {
                        out.set(x, y, c, a * out.get(x, y, c) + b);
                    }
                }
            }
        }
        if self.grayscale && ch == 3 {
            let gray = to_grayscale(&out);
            out = Image::from_fn(side, side, 3, |x, y, _| gray.get(x, y));
        }
        out
    }
}

/// Random flip / quarter rotation / colour jitter / grayscale.
pub fn transform_crop(tile: &Image, rng: &mut Rng) -> Image {
    TransformParams::sample(rng).apply(tile)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub tile_side: usize,
    /// `[a, b, T(a), T(b)]`.
    pub tiles: [Image; 4],
    pub canvas: Image,
    pub source_id: String,
    pub scale_level: usize,
}

fn tile_canvas(tiles: &[Image; 4]) -> Image {
    let side = tiles[0].width();
    let ch = tiles[0].channels();
    Image::from_fn(2 * side, 2 * side, ch, |x, y, c| {
        let t = (y / side) * 2 + x / side;
        tiles[t].get(x % side, y % side, c)
    })
}

/// Pairs crops within each scale level and tiles each pair with its
/// transformed copies.
pub fn mix_pairs(crops: &[Crop], rng: &mut Rng) -> Vec<MixedSample> {
    let mut out = Vec::new();
    for level in 0..NUM_LEVELS {
        let mut members: Vec<&Crop> = crops.iter().filter(|c| c.level == level).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        for pair in members.chunks(2) {
            let a = &pair[0].image;
            let b = pair.get(1).map_or(a, |c| &c.image);
            let ta = transform_crop(a, rng);
            let tb = transform_crop(b, rng);
            let tiles = [a.clone(), b.clone(), ta, tb];
            out.push(MixedSample {
                tile_side: a.width(),
                canvas: tile_canvas(&tiles),
                tiles,
                source_id: String::new(),
                scale_level: level,
            });
        }
    }
    out
}

/// Full pipeline: plan, crop, mix.
pub fn rcm_positives(img: &Image, c: usize, rng: &mut Rng) -> Result<Vec<MixedSample>> {
    let plan = plan_crops(img.height(), img.width(), c)?;
    let crops = random_crop_set(img, &plan, rng)?;
    Ok(mix_pairs(&crops, rng))
}

/// Result of a dataset expansion.
#[derive(Clone, Debug, Default)]
pub struct Expansion {
    pub manifest: Manifest,
    pub generated: usize,
    pub sources: usize,
    /// Entries that could not be expanded, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

impl Expansion {
    /// Output size over input size.
    pub fn factor(&self) -> f64 {
        if self.sources == 0 {
            0.0
        } else {
            self.manifest.len() as f64 / self.sources as f64
        }
    }
}

fn unique_stems(manifest: &Manifest) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    manifest
        .entries
        .iter()
        .map(|e| {
            let stem = e
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let n = seen.entry(stem.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}-{}", *n - 1)
            }
        })
        .collect()
}

/// Writes every mixed sample of every entry as a PNG under `out_dir`.
///
/// Entry `i` uses the generator seeded with `seed ^ i`, so the result does
/// not depend on scheduling. Undecodable or too-small entries are recorded
/// in `failures` and skipped.
pub fn expand_dataset(
    manifest: &Manifest,
    c: usize,
    seed: u64,
    out_dir: &Path,
    keep_originals: bool,
) -> Result<Expansion> {
    if c < 2 {
        return Err(Error::InvalidC(c));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stems = unique_stems(manifest);
    let per_entry = par::map_indexed(&manifest.entries, |i, entry| -> Result<Vec<ManifestEntry>> {
        let img = load_image(&entry.path)?;
        let mut rng = rng_from_seed(entry_seed(seed, i));
        let samples = rcm_positives(&img, c, &mut rng)?;
        let mut level_index = [0usize; NUM_LEVELS];
        let mut written = Vec::with_capacity(samples.len());
        for s in samples {
            let idx = level_index[s.scale_level];
            level_index[s.scale_level] += 1;
            let name = format!("{}_rcm_{}_{}", stems[i], s.scale_level, idx);
            let path = out_dir.join(format!("{name}.png"));
            save_png(&s.canvas, &path)?;
            written.push(ManifestEntry::new(path).with_id(name));
        }
        Ok(written)
    });

    let mut out = Expansion {
        sources: manifest.len(),
        ..Default::default()
    };
    for (entry, result) in manifest.entries.iter().zip(per_entry) {
        match result {
            Ok(generated) => {
                if keep_originals {
                    out.manifest.entries.push(entry.clone());
                }
                out.generated += generated.len();
                out.manifest.entries.extend(generated);
            }
            Err(Error::Io { path, source }) if path.starts_with(out_dir) => {
                return Err(Error::Io { path, source });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.path.display());
                out.failures.push((entry.path.clone(), e.to_string()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::from_fn(w, h, 3, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn plan_examples() {
        let p = plan_crops(224, 224, 2).unwrap();
        assert_eq!(
            p.levels,
            [
                ScaleLevel { side: 112, count: 2 },
                ScaleLevel { side: 56, count: 4 },
                ScaleLevel { side: 28, count: 8 }
            ]
        );
        assert_eq!(p.total_crops(), 14);
        let p = plan_crops(240, 320, 3).unwrap();
        assert_eq!(p.short_side, 240);
        assert_eq!(
            p.levels.map(|l| (l.side, l.count)),
            [(80, 3), (40, 6), (20, 12)]
        );
        assert_eq!(p.total_crops(), 21);
        assert!(matches!(
            plan_crops(224, 224, 60),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(matches!(plan_crops(224, 224, 1), Err(Error::InvalidC(1))));
    }

    #[test]
    fn crop_counts_and_sizes() {
        let img = noise(224, 224, 1);
        let plan = plan_crops(224, 224, 2).unwrap();
        let crops = random_crop_set(&img, &plan, &mut rng_from_seed(5)).unwrap();
        assert_eq!(crops.len(), 14);
        for (level, side, count) in [(0, 112, 2), (1, 56, 4), (2, 28, 8)] {
            let lv: Vec<_> = crops.iter().filter(|c| c.level == level).collect();
            assert_eq!(lv.len(), count);
            assert!(lv.iter().all(|c| c.image.width() == side && c.rect.side == side));
        }
    }

    #[test]
    fn crop_rects_are_deterministic() {
        let img = noise(40, 30, 2);
        let plan = plan_crops(30, 40, 3).unwrap();
        let a = random_crop_set(&img, &plan, &mut rng_from_seed(9)).unwrap();
        let b = random_crop_set(&img, &plan, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_rects_in_bounds_over_many_seeds() {
        let img = Image::filled(37, 23, 1, 0.3);
        let plan = plan_crops(23, 37, 2).unwrap();
        for seed in 0..1000 {
            let crops = random_crop_set(&img, &plan, &mut rng_from_seed(seed)).unwrap();
            for c in crops {
                assert!(c.rect.fits(37, 23), "seed {seed}: {:?}", c.rect);
            }
        }
    }

    #[test]
    fn identity_transform_is_noop() {
        let tile = noise(6, 6, 3);
        assert_eq!(TransformParams::identity().apply(&tile), tile);
    }

    #[test]
    fn half_turn_moves_corner_pixel() {
        let side = 5;
        let tile = Image::from_fn(side, side, 1, |x, y, _| if x == 0 && y == 0 { 1.0 } else { 0.0 });
        let t = TransformParams {
            quarter_turns: 2,
            ..TransformParams::identity()
        };
        let out = t.apply(&tile);
        assert_eq!(out.get(side - 1, side - 1, 0), 1.0);
        assert_eq!(out.pixels().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let tile = noise(7, 7, 4);
        let one = TransformParams {
            quarter_turns: 1,
            ..TransformParams::identity()
        };
        let mut t = tile.clone();
        for _ in 0..4 {
            t = one.apply(&t);
        }
        assert_eq!(t, tile);
    }

    #[test]
    fn jitter_clamps() {
        let tile = Image::filled(2, 2, 1, 0.9);
        let t = TransformParams {
            jitter: Some([(2.0, 0.1); 3]),
            ..TransformParams::identity()
        };
        assert!(t.apply(&tile).pixels().iter().all(|&v| v == 1.0));
        let t = TransformParams {
            jitter: Some([(0.5, -0.1); 3]),
            ..TransformParams::identity()
        };
        let expected = (0.5f64 * 0.9 - 0.1).clamp(0.0, 1.0);
        assert!(t.apply(&tile).pixels().iter().all(|&v| v == expected));
    }

    #[test]
    fn mixed_counts_match_closed_form() {
        for (c, expected) in [(2, 7), (3, 11), (4, 14), (5, 18)] {
            let img = noise(4 * c + 3, 4 * c + 1, c as u64);
            let samples = rcm_positives(&img, c, &mut rng_from_seed(0)).unwrap();
            assert_eq!(samples.len(), expected, "c={c}");
        }
        for c in 2..=10 {
            let plan = plan_crops(8 * c, 8 * c, c).unwrap();
            let enumerated: usize = plan.levels.iter().map(|l| l.count.div_ceil(2)).sum();
            assert_eq!(samples_per_image(c), enumerated);
            assert_eq!(plan.total_samples(), enumerated);
            let img = Image::filled(8 * c, 8 * c, 1, 0.5);
            let samples = rcm_positives(&img, c, &mut rng_from_seed(c as u64)).unwrap();
            assert_eq!(samples.len(), enumerated);
            assert!(samples.len() >= 7);
        }
    }

    #[test]
    fn canvas_layout() {
        let img = noise(32, 32, 11);
        let samples = rcm_positives(&img, 2, &mut rng_from_seed(3)).unwrap();
        for s in &samples {
            let side = s.tile_side;
            assert_eq!(s.canvas.width(), 2 * side);
            assert_eq!(s.canvas.height(), 2 * side);
            for (t, tile) in s.tiles.iter().enumerate() {
                let (ox, oy) = ((t % 2) * side, (t / 2) * side);
                let sub = crop(&s.canvas, Rect::new(ox, oy, side)).unwrap();
                assert_eq!(&sub, tile);
            }
        }
        // Original tiles are literal sub-grids of the source image.
        for s in &samples {
            let found = (0..=32 - s.tile_side).any(|y| {
                (0..=32 - s.tile_side)
                    .any(|x| crop(&img, Rect::new(x, y, s.tile_side)).unwrap() == s.tiles[0])
            });
            assert!(found);
        }
    }

    #[test]
    fn odd_level_self_pairs_leftover() {
        let img = noise(24, 24, 12);
        let samples = rcm_positives(&img, 3, &mut rng_from_seed(8)).unwrap();
        let level0: Vec<_> = samples.iter().filter(|s| s.scale_level == 0).collect();
        assert_eq!(level0.len(), 2);
        assert_eq!(
            level0.iter().filter(|s| s.tiles[0] == s.tiles[1]).count(),
            1
        );
    }

    #[test]
    fn expand_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = expand_dataset(&Manifest::default(), 2, 0, dir.path(), false).unwrap();
        assert!(out.manifest.is_empty());
        assert!(matches!(
            expand_dataset(&Manifest::default(), 1, 0, dir.path(), false),
            Err(Error::InvalidC(1))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn transform_preserves_shape_and_range(seed in any::<u64>(), side in 1usize..12, ch in prop_oneof![Just(1usize), Just(3usize)]) {
            let mut rng = rng_from_seed(seed);
            let tile = Image::from_fn(side, side, ch, |_, _, _| rng.random::<f64>());
            let out = transform_crop(&tile, &mut rng);
            prop_assert_eq!(out.width(), side);
            prop_assert_eq!(out.height(), side);
            prop_assert_eq!(out.channels(), ch);
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn positives_are_deterministic(seed in any::<u64>(), c in 2usize..5) {
            let img = noise(4 * c + 5, 4 * c + 2, seed);
            let a = rcm_positives(&img, c, &mut rng_from_seed(seed)).unwrap();
            let b = rcm_positives(&img, c, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn crop_total_is_seven_c(c in 2usize..=16, extra in 0usize..20) {
            let plan = plan_crops(4 * c + extra, 4 * c + 2 * extra, c).unwrap();
            prop_assert_eq!(plan.total_crops(), 7 * c);
            prop_assert!(plan.levels.iter().all(|l| l.side >= 1));
        }
    }
}
