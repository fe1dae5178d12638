//! Homomorphic illumination correction.
//!
//! Each input frame is treated as the product of a slowly varying
//! illumination field and a reflectance field. Working in the log domain
//! turns the product into a sum, so subtracting a box-blurred copy removes
//! the smooth illumination component and keeps the reflectance detail.

use rayon::prelude::*;

use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomomorphicConfig {
    /// Side of the square averaging window used as the low-pass estimate.
    pub kernel_size: usize,
    /// Offset added before the log so zero pixels stay finite.
    pub epsilon_log: f64,
}

impl Default for HomomorphicConfig {
    fn default() -> Self {
        HomomorphicConfig {
            kernel_size: 21,
            epsilon_log: 1e-6,
        }
    }
}

impl HomomorphicConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err("homomorphic kernel size must be odd and >= 3".into());
        }
        if !(self.epsilon_log > 0.0) {
            return Err("epsilon_log must be positive".into());
        }
        Ok(())
    }
}

/// Separable box mean with replicate padding. Plain per-pixel summation:
/// the window is small and a fixed summation order keeps results
/// reproducible across thread counts.
pub(crate) fn box_mean(src: &[f64], width: usize, height: usize, size: usize) -> Vec<f64> {
    debug_assert!(size % 2 == 1);
    let half = (size / 2) as isize;
    let mut rows = vec![0.0; src.len()];
    rows.par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, out_row)| {
            let row = &src[y * width..(y + 1) * width];
            for (x, out) in out_row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for dx in -half..=half {
                    let xi = (x as isize + dx).clamp(0, width as isize - 1) as usize;
                    sum += row[xi];
                }
                *out = sum;
            }
        });
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, out_row)| {
            for (x, out) in out_row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for dy in -half..=half {
                    let yi = (y as isize + dy).clamp(0, height as isize - 1) as usize;
                    sum += rows[yi * width + x];
                }
                *out = sum / (size * size) as f64;
            }
        });
    out
}

/// Remove low-frequency illumination from `img`.
///
/// The output is `exp(log(img + eps) - box(log(img + eps)))`, affinely
/// rescaled into `[0, 1]`. A constant input comes back constant.
pub fn homomorphic_correct(img: &GrayImage, cfg: &HomomorphicConfig) -> GrayImage {
    let log_img: Vec<f64> = img
        .data
        .iter()
        .map(|v| (v + cfg.epsilon_log).ln())
        .collect();
    let low = box_mean(&log_img, img.width, img.height, cfg.kernel_size);
    let mut data: Vec<f64> = log_img
        .iter()
        .zip(&low)
        .map(|(l, m)| (l - m).exp())
        .collect();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &data {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    if span > 1e-15 {
        for v in &mut data {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        // Flat field: normalization is degenerate, return mid-gray.
        for v in &mut data {
            *v = 0.5;
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}
