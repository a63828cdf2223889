//! Image loading, intensity windowing, fixed-aspect resizing, training-time
//! crop augmentation and mask application.

use std::path::Path;

use image::{DynamicImage, GrayImage};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image contains non-finite values")]
    NonFiniteInput,
    #[error("image is empty")]
    EmptyImage,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("target side {0} is below the minimum of 8")]
    TargetTooSmall(usize),
    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("failed to encode image: {0}")]
    Encode(String),
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count must equal height * width");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum()
    }

    /// Quantizes `[0, 1]` intensities to an 8-bit grayscale image.
    pub fn to_gray8(&self) -> GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, PreprocessError> {
        let mut out = Vec::new();
        DynamicImage::ImageLuma8(self.to_gray8())
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| PreprocessError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PreprocessError> {
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| PreprocessError::Encode(e.to_string()))
    }
}

/// Converts a decoded image to raw single-channel intensities. Gray inputs
/// keep their native 8- or 16-bit scale; color inputs are luminance-weighted.
pub fn to_intensity(img: &DynamicImage) -> ImageBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f32).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as f32).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32).collect(),
        DynamicImage::ImageLumaA16(g) => g.pixels().map(|p| p.0[0] as f32).collect(),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| luminance(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32))
            .collect(),
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| luminance(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32))
            .collect(),
    };
    ImageBuffer::new(h, w, pixels)
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, PreprocessError> {
    let img = image::load_from_memory(bytes).map_err(|e| PreprocessError::Decode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(to_intensity(&img))
}

pub fn load_image(path: &Path) -> Result<ImageBuffer, PreprocessError> {
    let img = image::open(path).map_err(|e| PreprocessError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(to_intensity(&img))
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile_sorted(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

pub const WINDOW_LOW: f64 = 0.01;
pub const WINDOW_HIGH: f64 = 0.99;

/// Clips to the 1st/99th percentiles and maps that window onto `[0, 1]`.
/// A degenerate window (constant image) maps to all zeros.
pub fn normalize_intensity(raw: &ImageBuffer) -> Result<ImageBuffer, PreprocessError> {
    if raw.pixels.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    if raw.pixels.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFiniteInput);
    }
    let mut sorted = raw.pixels.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, WINDOW_LOW);
    let hi = percentile_sorted(&sorted, WINDOW_HIGH);
    let span = hi - lo;
    let pixels = if span <= 0.0 {
        vec![0.0; raw.pixels.len()]
    } else {
        raw.pixels
            .iter()
            .map(|&v| ((v as f64).clamp(lo, hi) - lo) / span)
            .map(|v| v as f32)
            .collect()
    };
    Ok(ImageBuffer::new(raw.height, raw.width, pixels))
}

/// Bilinear resampling with pixel-center alignment; sampling at the same size
/// reproduces the input exactly.
fn bilinear_resample(img: &ImageBuffer, out_h: usize, out_w: usize) -> ImageBuffer {
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    ImageBuffer::from_fn(out_h, out_w, |y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = img.get(y0, x0) as f64 * (1.0 - tx) + img.get(y0, x1) as f64 * tx;
        let bottom = img.get(y1, x0) as f64 * (1.0 - tx) + img.get(y1, x1) as f64 * tx;
        (top * (1.0 - ty) + bottom * ty) as f32
    })
}

/// Where the resized content sits inside the padded square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContentBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn fixed_aspect_box(height: usize, width: usize, target: usize) -> ContentBox {
    let long = height.max(width) as f64;
    let scale = target as f64 / long;
    let ch = ((height as f64 * scale).round() as usize).clamp(1, target);
    let cw = ((width as f64 * scale).round() as usize).clamp(1, target);
    ContentBox {
        top: (target - ch) / 2,
        left: (target - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Scales the longer side to `target`, keeps the aspect ratio, and centers
/// the result on a zero `target x target` canvas.
pub fn resize_fixed_aspect(img: &ImageBuffer, target: usize) -> Result<ImageBuffer, PreprocessError> {
    if target < 8 {
        return Err(PreprocessError::TargetTooSmall(target));
    }
    if img.pixels.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let bx = fixed_aspect_box(img.height, img.width, target);
    let content = if (bx.height, bx.width) == img.shape() {
        img.clone()
    } else {
        bilinear_resample(img, bx.height, bx.width)
    };
    let mut out = ImageBuffer::zeros(target, target);
    for y in 0..bx.height {
        let src = &content.pixels[y * bx.width..(y + 1) * bx.width];
        let start = (bx.top + y) * target + bx.left;
        out.pixels[start..start + bx.width].copy_from_slice(src);
    }
    Ok(out)
}

/// Zero-pads by `pad` on every side and extracts a random window of the
/// original size. Returns the window offset into the padded canvas.
pub fn train_crop_with_offsets<R: Rng + ?Sized>(
    img: &ImageBuffer,
    pad: usize,
    rng: &mut R,
) -> (ImageBuffer, (usize, usize)) {
    if pad == 0 {
        return (img.clone(), (0, 0));
    }
    let oy = rng.gen_range(0..=2 * pad);
    let ox = rng.gen_range(0..=2 * pad);
    let (h, w) = img.shape();
    let out = ImageBuffer::from_fn(h, w, |y, x| {
        let sy = (y + oy) as isize - pad as isize;
        let sx = (x + ox) as isize - pad as isize;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img.get(sy as usize, sx as usize)
        } else {
            0.0
        }
    });
    (out, (oy, ox))
}

pub fn train_crop<R: Rng + ?Sized>(img: &ImageBuffer, pad: usize, rng: &mut R) -> ImageBuffer {
    train_crop_with_offsets(img, pad, rng).0
}

/// Binary mask with the same layout as [`ImageBuffer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Thresholds an image at 0.5 of its own maximum scale.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let max = img.pixels.iter().copied().fold(0.0f32, f32::max);
        let thr = if max > 0.0 { max * 0.5 } else { f32::INFINITY };
        Self::new(
            img.height,
            img.width,
            img.pixels.iter().map(|&v| v >= thr).collect(),
        )
    }
}

/// Source of region-of-interest masks (typically a lung segmenter).
pub trait MaskProvider: Send + Sync {
    fn provide(&self, image: &ImageBuffer) -> BinaryMask;
}

/// Keeps every pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMask;

impl MaskProvider for IdentityMask {
    fn provide(&self, image: &ImageBuffer) -> BinaryMask {
        BinaryMask::filled(image.height, image.width, true)
    }
}

/// Returns the same mask for every image.
#[derive(Debug, Clone)]
pub struct FixedMask(pub BinaryMask);

impl MaskProvider for FixedMask {
    fn provide(&self, _image: &ImageBuffer) -> BinaryMask {
        self.0.clone()
    }
}

pub fn apply_binary_mask(img: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer, PreprocessError> {
    if mask.shape() != img.shape() {
        return Err(PreprocessError::ShapeMismatch {
            expected: img.shape(),
            actual: mask.shape(),
        });
    }
    let pixels = img
        .pixels
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(ImageBuffer::new(img.height, img.width, pixels))
}

pub fn apply_mask(img: &ImageBuffer, provider: &dyn MaskProvider) -> Result<ImageBuffer, PreprocessError> {
    apply_binary_mask(img, &provider.provide(img))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_SIDE: usize = 256;
pub const DEFAULT_CROP_PAD: usize = 16;

/// The full preprocessing chain: windowing, fixed-aspect resize, masking and
/// (training only) random crop.
pub struct Preprocessor {
    pub side: usize,
    pub crop_pad: usize,
    pub mask: Box<dyn MaskProvider>,
}

impl std::fmt::Debug for Preprocessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Preprocessor")
            .field("side", &self.side)
            .field("crop_pad", &self.crop_pad)
            .finish_non_exhaustive()
    }
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(DEFAULT_SIDE)
    }
}

impl Preprocessor {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            crop_pad: DEFAULT_CROP_PAD,
            mask: Box::new(IdentityMask),
        }
    }

    pub fn with_mask(mut self, mask: impl MaskProvider + 'static) -> Self {
        self.mask = Box::new(mask);
        self
    }

    pub fn with_crop_pad(mut self, pad: usize) -> Self {
        self.crop_pad = pad;
        self
    }

    pub fn prepare_eval(&self, raw: &ImageBuffer) -> Result<ImageBuffer, PreprocessError> {
        let img = normalize_intensity(raw)?;
        let img = resize_fixed_aspect(&img, self.side)?;
        apply_mask(&img, self.mask.as_ref())
    }

    pub fn prepare<R: Rng + ?Sized>(
        &self,
        raw: &ImageBuffer,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ImageBuffer, PreprocessError> {
        let img = self.prepare_eval(raw)?;
        Ok(match mode {
            Mode::Eval => img,
            Mode::Train => train_crop(&img, self.crop_pad, rng),
        })
    }

    pub fn load_eval(&self, path: &Path) -> Result<ImageBuffer, PreprocessError> {
        self.prepare_eval(&load_image(path)?)
    }
}
