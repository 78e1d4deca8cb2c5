//! PNG I/O and pixel normalization.

use std::path::Path;

use crate::error::{Error, Result};

/// Affine map from byte space to model space: x / 127.5 - 1.
pub fn normalize_pixels(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&b| b as f32 / 127.5 - 1.0).collect()
}

/// The same map on a real-valued pixel, with range checking.
pub fn pixel_to_unit(x: f64) -> Result<f32> {
    if !(0.0..=255.0).contains(&x) {
        return Err(Error::domain(format!("pixel value {x} outside [0, 255]")));
    }
    Ok((x / 127.5 - 1.0) as f32)
}

/// Inverse map with rounding; values are clamped into [-1, 1] first.
pub fn denormalize_pixels(pixels: &[f32]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&p| {
            let p = p.clamp(-1.0, 1.0);
            ((p + 1.0) * 127.5).round() as u8
        })
        .collect()
}

/// Load an 8-bit RGB PNG into CHW model-space pixels.
/// Returns (pixels, height, width).
pub fn load_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw(); // HWC order
    let mut chw = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                chw[c * h * w + y * w + x] = raw[(y * w + x) * 3 + c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok((chw, h, w))
}

/// Save CHW model-space pixels as an 8-bit RGB PNG.
pub fn save_png(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(pixels.len(), 3 * h * w);
    let mut raw = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let p = pixels[c * h * w + y * w + x].clamp(-1.0, 1.0);
                raw[(y * w + x) * 3 + c] = ((p + 1.0) * 127.5).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize_pixels(&[0])[0], -1.0);
        assert_eq!(normalize_pixels(&[255])[0], 1.0);
        assert_eq!(pixel_to_unit(127.5).unwrap(), 0.0);
        assert!(pixel_to_unit(-1.0).is_err());
        assert!(pixel_to_unit(255.5).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let normed = normalize_pixels(&bytes);
        let back = denormalize_pixels(&normed);
        assert_eq!(bytes, back);
    }
}
