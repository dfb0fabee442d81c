//! Image representation and geometric primitives.
//!
//! Intensities are `f64` in `[0, 1]`; the only 8-bit conversion happens at
//! the decode/encode boundary.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Dense row-major, channel-interleaved image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

/// Single-channel image used by the heuristic scorers.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

/// Square crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, side: usize) -> Self {
        Rect { x, y, side }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.side >= 1 && self.x + self.side <= width && self.y + self.side <= height
    }
}

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
        return Err(Error::ShapeMismatch {
            expected: vec![height.max(1), width.max(1), 1],
            actual: vec![height, width, channels],
        });
    }
    if len != width * height * channels {
        return Err(Error::ShapeMismatch {
            expected: vec![width * height * channels],
            actual: vec![len],
        });
    }
    Ok(())
}

fn check_range(pixels: &[f64]) -> Result<()> {
    if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidConfig(format!(
            "pixel intensity {v} outside [0, 1]"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height, channels, pixels.len())?;
        check_range(&pixels)?;
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Image filled with a single value in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image::new(
            width,
            height,
            channels,
            vec![value.clamp(0.0, 1.0); width * height * channels],
        )
        .expect("valid dimensions")
    }

    /// Builds an image by evaluating `f(x, y, channel)`; values are clamped.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(width, height, channels, pixels).expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn short_side(&self) -> usize {
        self.width.min(self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Writes a value, clamping it into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Same image with three channels; gray is replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels,
        }
    }

    /// Planar CHW copy with three channels, the layout the encoder consumes.
    pub fn to_chw_rgb(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                let src = if self.channels == 3 { c } else { 0 };
                out[c * plane + i] = self.pixels[i * self.channels + src];
            }
        }
        out
    }

    /// Raw 8-bit samples, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 1, pixels.len())?;
        check_range(&pixels)?;
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

impl From<GrayImage> for Image {
    fn from(g: GrayImage) -> Self {
        Image {
            width: g.width,
            height: g.height,
            channels: 1,
            pixels: g.pixels,
        }
    }
}

/// Decodes a PNG or JPEG byte stream.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(from_dynamic(decoded))
}

fn from_dynamic(decoded: DynamicImage) -> Image {
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    if gray {
        let buf = decoded.to_luma8();
        let pixels = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image {
            width,
            height,
            channels: 1,
            pixels,
        }
    } else {
        let buf = decoded.to_rgb8();
        let pixels = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image {
            width,
            height,
            channels: 3,
            pixels,
        }
    }
}

/// Reads and decodes an image file.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Encodes to PNG (8-bit gray or RGB).
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = (img.width as u32, img.height as u32);
    let raw = img.to_u8();
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("buffer size"),
        )
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer size"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rec. 601 luma; single-channel input passes through unchanged.
pub fn to_grayscale(img: &Image) -> GrayImage {
    let pixels = if img.channels == 1 {
        img.pixels.clone()
    } else {
        img.pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect()
    };
    GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

pub fn crop(img: &Image, r: Rect) -> Result<Image> {
    if !r.fits(img.width, img.height) {
        return Err(Error::OutOfBounds {
            x: r.x,
            y: r.y,
            side: r.side,
            width: img.width,
            height: img.height,
        });
    }
    let ch = img.channels;
    let mut pixels = Vec::with_capacity(r.side * r.side * ch);
    for y in r.y..r.y + r.side {
        let start = (y * img.width + r.x) * ch;
        pixels.extend_from_slice(&img.pixels[start..start + r.side * ch]);
    }
    Ok(Image {
        width: r.side,
        height: r.side,
        channels: ch,
        pixels,
    })
}

/// Source coordinate for output index `i` under corner-aligned sampling.
#[inline]
fn corner_aligned(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling. Zero target sizes are
/// treated as 1.
pub fn resize(img: &Image, w: usize, h: usize) -> Image {
    let (w, h) = (w.max(1), h.max(1));
    if w == img.width && h == img.height {
        return img.clone();
    }
    let ch = img.channels;
    let mut pixels = Vec::with_capacity(w * h * ch);
    for oy in 0..h {
        let sy = corner_aligned(oy, img.height, h);
        let y0 = (sy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..w {
            let sx = corner_aligned(ox, img.width, w);
            let x0 = (sx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..ch {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        width: w,
        height: h,
        channels: ch,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn png_gray(w: u32, h: u32, value: u8) -> Vec<u8> {
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, vec![value; (w * h) as usize]).unwrap();
        let mut out = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(buf)
            .write_to(&mut out, image::ImageFormat::Png)
            .unwrap();
        out.into_inner()
    }

    fn distinct_4x4() -> Image {
        Image::from_fn(4, 4, 1, |x, y, _| (y * 4 + x) as f64 / 15.0)
    }

    #[test]
    fn decode_maps_bytes_to_unit_interval() {
        let img = decode_image(&png_gray(2, 2, 255)).unwrap();
        assert_eq!(img.pixels(), &[1.0; 4]);
        let img = decode_image(&png_gray(1, 1, 0)).unwrap();
        assert_eq!(img.pixels(), &[0.0]);
        let img = decode_image(&png_gray(1, 1, 128)).unwrap();
        assert!((img.pixels()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(img.pixels()[0], 128.0 / 255.0);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(decode_image(b"not an image"), Err(Error::Decode(_))));
        let mut truncated = png_gray(8, 8, 3);
        truncated.truncate(30);
        assert!(decode_image(&truncated).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let img = Image::from_fn(5, 3, 3, |x, y, c| ((x * 7 + y * 13 + c * 31) % 256) as f64 / 255.0);
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_weights() {
        let white = Image::filled(1, 1, 3, 1.0);
        assert!((to_grayscale(&white).pixels()[0] - 1.0).abs() < 1e-12);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).pixels()[0] - 0.299).abs() < 1e-12);
        let gray = distinct_4x4();
        assert_eq!(to_grayscale(&gray).pixels(), gray.pixels());
    }

    #[test]
    fn crop_cases() {
        let img = distinct_4x4();
        assert_eq!(crop(&img, Rect::new(0, 0, 4)).unwrap(), img);
        let sub = crop(&img, Rect::new(1, 1, 2)).unwrap();
        let expected: Vec<f64> = [5, 6, 9, 10].iter().map(|&i| i as f64 / 15.0).collect();
        assert_eq!(sub.pixels(), expected.as_slice());
        assert!(matches!(
            crop(&img, Rect::new(3, 3, 2)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn resize_cases() {
        let img = distinct_4x4();
        assert_eq!(resize(&img, 4, 4), img);
        let half = Image::filled(3, 5, 3, 0.5);
        let big = resize(&half, 17, 2);
        assert!(big.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let ramp = Image::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(resize(&ramp, 3, 1).pixels(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..12, 1usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(0.0f64..=1.0, w * h * c)
                .prop_map(move |px| Image::new(w, h, c, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn crop_composition(img in arb_image(), fa in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), fb in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)) {
            let pick = |f: f64, n: usize| ((f * n as f64) as usize).min(n - 1);
            let max_a = img.width().min(img.height());
            let a_side = 1 + pick(fa.2, max_a);
            let ra = Rect::new(pick(fa.0, img.width() - a_side + 1), pick(fa.1, img.height() - a_side + 1), a_side);
            let b_side = 1 + pick(fb.2, a_side);
            let rb = Rect::new(pick(fb.0, a_side - b_side + 1), pick(fb.1, a_side - b_side + 1), b_side);
            let two_step = crop(&crop(&img, ra).unwrap(), rb).unwrap();
            let direct = crop(&img, Rect::new(ra.x + rb.x, ra.y + rb.y, rb.side)).unwrap();
            prop_assert_eq!(two_step, direct);
        }

        #[test]
        fn resize_stays_in_range(img in arb_image(), w in 1usize..20, h in 1usize..20) {
            let out = resize(&img, w, h);
            prop_assert_eq!(out.pixels().len(), w * h * img.channels());
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn constant_stays_constant(v in 0.0f64..=1.0, w in 1usize..20, h in 1usize..20) {
            let out = resize(&Image::filled(4, 3, 1, v), w, h);
            prop_assert!(out.pixels().iter().all(|p| (p - v).abs() < 1e-12));
        }
    }
}
