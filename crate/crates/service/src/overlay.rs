//! Attention heatmap blended over the grayscale radiograph.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use cxrmetric_core::embedder::AttentionMask;
use cxrmetric_core::preprocess::ImageBuffer;

use crate::ServiceError;

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Viridis sampled at nine evenly spaced stops; linear in between.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 45.0, 123.0],
    [59.0, 82.0, 139.0],
    [44.0, 114.0, 142.0],
    [33.0, 145.0, 140.0],
    [40.0, 174.0, 128.0],
    [94.0, 201.0, 98.0],
    [173.0, 220.0, 48.0],
    [253.0, 231.0, 37.0],
];

pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// Bilinear upsampling with pixel-center alignment, edges clamped.
pub fn upsample(mask: &AttentionMask, height: usize, width: usize) -> Vec<f64> {
    let g = mask.side;
    let coord = |p: usize, n: usize| -> (usize, usize, f64) {
        let x = ((p as f64 + 0.5) * g as f64 / n as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(g - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width);
            let top = mask.get(y0, x0) * (1.0 - fx) + mask.get(y0, x1) * fx;
            let bottom = mask.get(y1, x0) * (1.0 - fx) + mask.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn overlay_rgb(image: &ImageBuffer, mask: &AttentionMask) -> Result<RgbImage, ServiceError> {
    if mask.side == 0 || mask.values.len() != mask.side * mask.side {
        return Err(ServiceError::ShapeMismatch(format!(
            "mask of side {} holds {} values",
            mask.side,
            mask.values.len()
        )));
    }
    if mask.values.iter().any(|v| !v.is_finite()) {
        return Err(ServiceError::ShapeMismatch("mask contains non-finite values".into()));
    }
    let (h, w) = image.shape();
    if h == 0 || w == 0 {
        return Err(ServiceError::ShapeMismatch("empty image".into()));
    }
    let heat = upsample(mask, h, w);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = f64::from(image.get(y, x)).clamp(0.0, 1.0) * 255.0;
            let color = colormap(heat[y * w + x]);
            let px = color.map(|c| ((1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * c).round().clamp(0.0, 255.0) as u8);
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// PNG bytes of the overlay; deterministic for fixed inputs.
pub fn render_attention_overlay(image: &ImageBuffer, mask: &AttentionMask) -> Result<Vec<u8>, ServiceError> {
    let rgb = overlay_rgb(image, mask)?;
    let mut bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| ServiceError::Internal(format!("png encode: {e}")))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> ImageBuffer {
        ImageBuffer::from_fn(256, 256, |y, x| ((y + x) % 256) as f32 / 255.0)
    }

    fn mask(side: usize, f: impl Fn(usize, usize) -> f64) -> AttentionMask {
        AttentionMask {
            side,
            values: (0..side * side).map(|i| f(i / side, i % side)).collect(),
        }
    }

    fn blend(gray: f32, c: f64) -> u8 {
        ((1.0 - OVERLAY_ALPHA) * f64::from(gray) * 255.0 + OVERLAY_ALPHA * c).round() as u8
    }

    #[test]
    fn zero_mask_tints_with_low_color() {
        let img = gradient_image();
        let out = overlay_rgb(&img, &mask(16, |_, _| 0.0)).unwrap();
        for (y, x) in [(0, 0), (10, 200), (255, 255)] {
            let g = img.get(y, x);
            let px = out.get_pixel(x as u32, y as u32).0;
            assert_eq!(px, [blend(g, 68.0), blend(g, 1.0), blend(g, 84.0)]);
        }
    }

    #[test]
    fn ones_mask_is_uniform_full_tint() {
        let img = ImageBuffer::from_fn(64, 64, |_, _| 0.5);
        let out = overlay_rgb(&img, &mask(4, |_, _| 1.0)).unwrap();
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
        assert_eq!(first.0, [blend(0.5, 253.0), blend(0.5, 231.0), blend(0.5, 37.0)]);
    }

    #[test]
    fn corner_hot_cell_peaks_in_its_footprint() {
        let img = ImageBuffer::from_fn(256, 256, |_, _| 0.5);
        let out = overlay_rgb(&img, &mask(16, |y, x| if y == 0 && x == 0 { 1.0 } else { 0.0 })).unwrap();
        let chroma = |p: &Rgb<u8>| i32::from(*p.0.iter().max().unwrap()) - i32::from(*p.0.iter().min().unwrap());
        let (mut best, mut at) = (-1, (0, 0));
        for (x, y, p) in out.enumerate_pixels() {
            if chroma(p) > best {
                best = chroma(p);
                at = (y, x);
            }
        }
        assert!(at.0 < 16 && at.1 < 16, "max chroma at {at:?}");
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let img = gradient_image();
        let m = mask(16, |y, x| ((y * 16 + x) as f64 / 255.0).sqrt());
        let a = render_attention_overlay(&img, &m).unwrap();
        assert_eq!(a, render_attention_overlay(&img, &m).unwrap());
        assert_eq!(&a[1..4], b"PNG");
    }

    #[test]
    fn malformed_mask_rejected() {
        let img = gradient_image();
        let bad = AttentionMask {
            side: 4,
            values: vec![0.0; 15],
        };
        assert!(matches!(render_attention_overlay(&img, &bad), Err(ServiceError::ShapeMismatch(_))));
    }

    #[test]
    fn upsample_reproduces_constant_and_grid_values() {
        let m = mask(4, |y, x| (y * 4 + x) as f64);
        let up = upsample(&m, 4, 4);
        assert_eq!(up, m.values);
        let flat = upsample(&mask(2, |_, _| 0.25), 9, 7);
        assert!(flat.iter().all(|&v| v == 0.25));
    }
}
