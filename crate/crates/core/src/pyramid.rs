//! Images, resizing, training augmentation and multi-resolution pyramids.
//!
//! Images are stored as interleaved RGB `f32` in `[0, 1]`, row-major. Two
//! on-disk formats are understood: binary PPM (`P6`, maxval 255) and a raw
//! planar float container (`MSVRRAW1`, width and height as little-endian
//! `u32`, then the R, G and B planes as little-endian `f32`).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

const RAW_MAGIC: &[u8; 8] = b"MSVRRAW1";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image from interleaved RGB values, clamping them into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be at least 1×1, got {width}×{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Planar `[3×h×w]` tensor for the backbone.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("image extents are positive")
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                pixels.extend_from_slice(&self.pixels[i..i + 3]);
            }
        }
        Image { width: self.width, height: self.height, pixels }
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`; the window must lie inside.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}×{h}+{x0}+{y0} outside {}×{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(Image { width: w, height: h, pixels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Resizes to a `side × side` square with bilinear interpolation.
pub fn resize(img: &Image, side: usize) -> Result<Image> {
    resize_to(img, side, side, Interpolation::Bilinear)
}

/// Resizes using pixel-centre alignment: output pixel `i` samples the source
/// at `(i + 0.5)·src/dst − 0.5`, with coordinates clamped to the border.
pub fn resize_to(img: &Image, width: usize, height: usize, mode: Interpolation) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::Shape(format!("resize target must be at least 1×1, got {width}×{height}")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut pixels = Vec::with_capacity(width * height * 3);
    match mode {
        Interpolation::Nearest => {
            for y in 0..height {
                let src_y = (((y as f64 + 0.5) * sy) as usize).min(img.height - 1);
                for x in 0..width {
                    let src_x = (((x as f64 + 0.5) * sx) as usize).min(img.width - 1);
                    let i = (src_y * img.width + src_x) * 3;
                    pixels.extend_from_slice(&img.pixels[i..i + 3]);
                }
            }
        }
        Interpolation::Bilinear => {
            let taps_x: Vec<(usize, usize, f32)> = (0..width).map(|x| taps(x, sx, img.width)).collect();
            for y in 0..height {
                let (y0, y1, fy) = taps(y, sy, img.height);
                for &(x0, x1, fx) in &taps_x {
                    for c in 0..3 {
                        let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                        let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                        pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(Image { width, height, pixels })
}

fn taps(i: usize, scale: f64, extent: usize) -> (usize, usize, f32) {
    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Random crop and flip settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Smallest kept fraction of the image area.
    pub min_crop_area: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { min_crop_area: 0.875, flip_probability: 0.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_crop_area > 0.0 && self.min_crop_area <= 1.0) {
            return Err(Error::Config(format!("min_crop_area must be in (0, 1], got {}", self.min_crop_area)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// One concrete augmentation decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Kept fraction of the area; the crop keeps the aspect ratio.
    pub crop_area: f64,
    /// Crop anchor as fractions of the slack on each axis.
    pub anchor: (f64, f64),
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { crop_area: 1.0, anchor: (0.0, 0.0), flip: false };

    pub fn sample<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Self {
        let crop_area = if config.min_crop_area < 1.0 {
            rng.random_range(config.min_crop_area..=1.0)
        } else {
            1.0
        };
        let anchor = (rng.random::<f64>(), rng.random::<f64>());
        let flip = rng.random::<f64>() < config.flip_probability;
        AugmentDraw { crop_area, anchor, flip }
    }

    /// Crops, resizes back to the original extent, then optionally flips.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let side_fraction = self.crop_area.clamp(0.0, 1.0).sqrt();
        let w = ((img.width as f64 * side_fraction).round() as usize).clamp(1, img.width);
        let h = ((img.height as f64 * side_fraction).round() as usize).clamp(1, img.height);
        let x0 = ((img.width - w) as f64 * self.anchor.0.clamp(0.0, 1.0)).round() as usize;
        let y0 = ((img.height - h) as f64 * self.anchor.1.clamp(0.0, 1.0)).round() as usize;
        let cropped = if (w, h) == (img.width, img.height) {
            img.clone()
        } else {
            let c = img.crop(x0, y0, w, h)?;
            resize_to(&c, img.width, img.height, Interpolation::Bilinear)?
        };
        Ok(if self.flip { cropped.flip_horizontal() } else { cropped })
    }
}

/// Random crop (area fraction drawn from `[min_crop_area, 1]`, random anchor),
/// resized back to the input extent, then a horizontal flip with the
/// configured probability.
pub fn augment<R: Rng + ?Sized>(img: &Image, config: &AugmentConfig, rng: &mut R) -> Result<Image> {
    if img.width < 8 || img.height < 8 {
        return Err(Error::Shape(format!(
            "augmentation needs at least 8×8 pixels, got {}×{}",
            img.width, img.height
        )));
    }
    AugmentDraw::sample(config, rng).apply(img)
}

/// One source image at every branch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSample {
    pub images: Vec<Image>,
    pub source: String,
    pub label: usize,
}

impl PyramidSample {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.images.iter().map(Image::to_tensor).collect()
    }
}

/// Resizes `img` to each side in `scales`. When `augment` carries a config
/// and rng, a single crop/flip decision is drawn and applied before all the
/// resizes, so every scale sees the same geometry.
pub fn build_pyramid<R: Rng + ?Sized>(
    img: &Image,
    scales: &[usize],
    augment: Option<(&AugmentConfig, &mut R)>,
) -> Result<Vec<Image>> {
    if scales.is_empty() {
        return Err(Error::Shape("pyramid needs at least one scale".into()));
    }
    let base = match augment {
        Some((config, rng)) => AugmentDraw::sample(config, rng).apply(img)?,
        None => img.clone(),
    };
    scales.iter().map(|&side| resize(&base, side)).collect()
}

/// [`build_pyramid`] without augmentation, as used at test time.
pub fn plain_pyramid(img: &Image, scales: &[usize]) -> Result<Vec<Image>> {
    build_pyramid::<rand_chacha::ChaCha8Rng>(img, scales, None)
}

// --------------------------------------------------------------------------
// Codecs

/// Reads a PPM or raw planar image, chosen by file content.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        decode_ppm(&bytes)
    }
    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_raw(img))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Data(format!("unsupported image magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field {s:?}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let body = bytes.get(pos..pos + width * height * 3).ok_or_else(|| Error::Data("truncated PPM body".into()))?;
    let pixels = body.iter().map(|b| *b as f32 / maxval as f32).collect();
    Image::new(width, height, pixels)
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for c in 0..3 {
        for px in img.pixels.chunks_exact(3) {
            out.extend_from_slice(&px[c].to_le_bytes());
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Data("not a raw planar image".into()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let plane = width * height;
    let body = &bytes[16..];
    if body.len() != plane * 3 * 4 {
        return Err(Error::Data(format!("raw image body has {} bytes, expected {}", body.len(), plane * 12)));
    }
    let mut pixels = vec![0.0f32; plane * 3];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let (c, i) = (k / plane, k % plane);
        pixels[i * 3 + c] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Image::new(width, height, pixels)
}
