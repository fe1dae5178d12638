//! Thin wrappers over rustfft used by the Gabor bank and the
//! frequency-domain correlation engine.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::sync::Arc;

/// Round `n` up to the next integer whose prime factors are all in
/// {2, 3, 5}; rustfft is fastest on such sizes.
pub(crate) fn next_fast_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2usize, 3, 5] {
            while k % p == 0 {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// Pre-planned forward/inverse transforms for a fixed set of sizes.
/// Plans are `Arc<dyn Fft>` and safe to share across rayon workers.
pub(crate) struct PlanCache {
    plans: HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
}

impl PlanCache {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut planner = FftPlanner::new();
        let mut plans = HashMap::new();
        for size in sizes {
            plans.entry(size).or_insert_with(|| {
                (
                    planner.plan_fft(size, FftDirection::Forward),
                    planner.plan_fft(size, FftDirection::Inverse),
                )
            });
        }
        PlanCache { plans }
    }

    pub fn forward(&self, size: usize) -> &Arc<dyn Fft<f64>> {
        &self.plans[&size].0
    }

    pub fn inverse(&self, size: usize) -> &Arc<dyn Fft<f64>> {
        &self.plans[&size].1
    }
}

/// In-place 2D FFT over a row-major `width x height` buffer.
pub(crate) fn fft2d_inplace(
    data: &mut [Complex<f64>],
    width: usize,
    height: usize,
    inverse: bool,
) {
    debug_assert_eq!(data.len(), width * height);
    let mut planner = FftPlanner::new();
    let dir = if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    };
    let row_fft = planner.plan_fft(width, dir);
    let col_fft = planner.plan_fft(height, dir);

    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
    if inverse {
        let scale = 1.0 / (width * height) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sizes() {
        assert_eq!(next_fast_size(1), 1);
        assert_eq!(next_fast_size(17), 18);
        assert_eq!(next_fast_size(97), 100);
        assert_eq!(next_fast_size(128), 128);
    }

    #[test]
    fn fft2d_roundtrip() {
        let (w, h) = (12, 9);
        let orig: Vec<Complex<f64>> = (0..w * h)
            .map(|i| Complex::new((i % 7) as f64 * 0.3, 0.0))
            .collect();
        let mut data = orig.clone();
        fft2d_inplace(&mut data, w, h, false);
        fft2d_inplace(&mut data, w, h, true);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
