//! Raster carriers shared by every pipeline stage.
//!
//! `GrayImage` holds luminance in `[0, 1]` as `f64` so that downstream
//! filter arithmetic is reproducible to tight tolerances. `DisparityMap`
//! holds `f32` samples because its on-disk form (PFM) is 32-bit and
//! round-trips must be bit-exact; invalid pixels are the non-finite
//! sentinel `f32::INFINITY`, matching the Middlebury ground-truth encoding.

use crate::error::{Error, Result};

/// Single-channel luminance raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with indices clamped to the image bounds (replicate padding).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mirror left-right; used for the right-reference pipeline pass.
    pub fn mirrored(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Box-average downsample by an integer factor, truncating ragged edges.
    pub fn downsample(&self, factor: usize) -> GrayImage {
        assert!(factor >= 1);
        let width = (self.width / factor).max(1);
        let height = (self.height / factor).max(1);
        let mut data = Vec::with_capacity(width * height);
        for by in 0..height {
            for bx in 0..width {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let x = (bx * factor + dx).min(self.width - 1);
                        let y = (by * factor + dy).min(self.height - 1);
                        sum += self.get(x, y);
                    }
                }
                data.push(sum / (factor * factor) as f64);
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }
}

/// The in-memory invalid-disparity marker. Written to PFM as +inf.
pub const INVALID_DISPARITY: f32 = f32::INFINITY;

/// Per-pixel disparity raster; invalid entries are exactly [`INVALID_DISPARITY`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "disparity data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(DisparityMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        DisparityMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    /// Mirror left-right. Disparity magnitudes are unchanged: mirroring a
    /// rectified pair maps a left-reference match at `x - d` onto a
    /// mirrored-right-reference match at the mirrored coordinates.
    pub fn mirrored(&self) -> DisparityMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        DisparityMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Subsample every `factor`-th pixel and divide disparities by `factor`.
    /// Invalid pixels stay invalid; no interpolation across the sentinel.
    pub fn downsample(&self, factor: usize) -> DisparityMap {
        assert!(factor >= 1);
        let width = (self.width / factor).max(1);
        let height = (self.height / factor).max(1);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = self.get(x * factor, y * factor);
                data.push(if v.is_finite() {
                    v / factor as f32
                } else {
                    INVALID_DISPARITY
                });
            }
        }
        DisparityMap {
            width,
            height,
            data,
        }
    }
}

/// Interleaved 8-bit RGB raster for colormapped visualizations.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` bytes, row-major RGB.
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn black(width: usize, height: usize) -> Self {
        RgbRaster {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DisparityMap::new(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(GrayImage::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(GrayImage::new(1, 2, vec![0.5, f64::NAN]).is_err());
    }

    #[test]
    fn mirror_is_involutive() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.mirrored().mirrored(), img);
        assert_eq!(img.mirrored().get(0, 0), 0.2);
    }

    #[test]
    fn downsample_scales_disparity() {
        let map = DisparityMap::filled(4, 4, 8.0);
        let half = map.downsample(2);
        assert_eq!(half.width, 2);
        assert_eq!(half.get(0, 0), 4.0);
    }

    #[test]
    fn invalid_survives_downsample() {
        let mut map = DisparityMap::filled(4, 4, 8.0);
        map.set(0, 0, INVALID_DISPARITY);
        let half = map.downsample(2);
        assert!(!half.is_valid(0, 0));
        assert!(half.is_valid(1, 1));
    }
}
