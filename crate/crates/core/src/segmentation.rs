//! Unsupervised texture segmentation of the reference image.
//!
//! A bank of complex Gabor kernels (orientations crossed with an
//! octave-spaced wavelength ladder) produces magnitude responses; the
//! responses are Gaussian-smoothed, z-scored, augmented with weighted pixel
//! coordinates, and clustered with seeded k-means. The resulting zone map
//! drives the per-segment disparity ranges of the sparse cost volume.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{fft2d_inplace, next_fast_size};
use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq)]
pub struct GaborBankConfig {
    /// Kernel orientations in degrees.
    pub orientations_deg: Vec<f64>,
    /// First wavelength of the doubling ladder, in pixels (>= 2).
    pub wavelength_start: f64,
    /// Half-response spatial-frequency bandwidth in octaves.
    pub bandwidth: f64,
}

impl Default for GaborBankConfig {
    fn default() -> Self {
        GaborBankConfig {
            orientations_deg: vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0],
            wavelength_start: 2.0 * std::f64::consts::SQRT_2,
            bandwidth: 1.0,
        }
    }
}

impl GaborBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orientations_deg.is_empty() {
            return Err(Error::InvalidInput("no Gabor orientations".into()));
        }
        if !(self.wavelength_start >= 2.0) {
            return Err(Error::InvalidInput(
                "Gabor wavelength must be at least 2 pixels".into(),
            ));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidInput("Gabor bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// One complex Gabor kernel: a circular Gaussian envelope modulated by
/// `exp(i 2 pi x'/lambda)`, with the real part made DC-free.
#[derive(Debug, Clone)]
pub struct GaborKernel {
    pub wavelength: f64,
    pub orientation_deg: f64,
    /// Window side, odd.
    pub size: usize,
    pub data: Vec<Complex<f64>>,
}

/// Wavelengths `start * 2^k` strictly below the image hypotenuse.
pub fn wavelength_ladder(start: f64, dims: (usize, usize)) -> Vec<f64> {
    let hypot = (dims.0 as f64).hypot(dims.1 as f64);
    let mut out = Vec::new();
    let mut w = start;
    while w < hypot {
        out.push(w);
        w *= 2.0;
    }
    if out.is_empty() {
        out.push(start);
    }
    out
}

fn gabor_sigma(wavelength: f64, bandwidth: f64) -> f64 {
    // Relates the Gaussian envelope to the octave bandwidth of the filter.
    let k = (2.0f64.ln() / 2.0).sqrt() / std::f64::consts::PI;
    wavelength * k * (2.0f64.powf(bandwidth) + 1.0) / (2.0f64.powf(bandwidth) - 1.0)
}

fn make_kernel(wavelength: f64, orientation_deg: f64, bandwidth: f64, max_dim: usize) -> GaborKernel {
    let sigma = gabor_sigma(wavelength, bandwidth);
    // Truncate the envelope at 3 sigma, capped so kernels never exceed the
    // image extent (the largest ladder rungs would otherwise dwarf it).
    let mut radius = (3.0 * sigma).ceil() as usize;
    radius = radius.clamp(1, max_dim / 2 + 1);
    let size = 2 * radius + 1;
    let theta = orientation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let omega = 2.0 * std::f64::consts::PI / wavelength;

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - radius as f64;
            let dy = y as f64 - radius as f64;
            let xr = dx * cos_t + dy * sin_t;
            let env = (-(dx * dx + dy * dy) * inv_2s2).exp();
            let phase = omega * xr;
            data.push(Complex::new(env * phase.cos(), env * phase.sin()));
        }
    }
    // Remove the DC component of the real (cosine) part.
    let mean_re: f64 = data.iter().map(|c| c.re).sum::<f64>() / data.len() as f64;
    for c in &mut data {
        c.re -= mean_re;
    }
    // Unit L2 norm so response magnitudes are comparable across the bank.
    let norm: f64 = data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in &mut data {
            *c /= norm;
        }
    }
    GaborKernel {
        wavelength,
        orientation_deg,
        size,
        data,
    }
}

/// Build the full bank: one kernel per (orientation, wavelength) pair.
pub fn gabor_bank(cfg: &GaborBankConfig, dims: (usize, usize)) -> Result<Vec<GaborKernel>> {
    cfg.validate()?;
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::InvalidInput("image dimensions must be positive".into()));
    }
    let ladder = wavelength_ladder(cfg.wavelength_start, dims);
    let max_dim = dims.0.max(dims.1);
    let mut kernels = Vec::with_capacity(cfg.orientations_deg.len() * ladder.len());
    for &wavelength in &ladder {
        for &orientation in &cfg.orientations_deg {
            kernels.push(make_kernel(wavelength, orientation, cfg.bandwidth, max_dim));
        }
    }
    Ok(kernels)
}

/// Complex convolution of `img` with `kernel` via FFT, replicate-padded,
/// returning per-pixel response magnitude.
fn gabor_magnitude(img: &GrayImage, kernel: &GaborKernel) -> Vec<f64> {
    let r = kernel.size / 2;
    let pw = next_fast_size(img.width + 2 * r);
    let ph = next_fast_size(img.height + 2 * r);

    let mut field = vec![Complex::default(); pw * ph];
    for y in 0..ph {
        // Replicate-pad: clamp source coordinates into the image.
        let sy = (y as isize - r as isize).clamp(0, img.height as isize - 1) as usize;
        for x in 0..pw {
            let sx = (x as isize - r as isize).clamp(0, img.width as isize - 1) as usize;
            field[y * pw + x] = Complex::new(img.get(sx, sy), 0.0);
        }
    }
    let mut kbuf = vec![Complex::default(); pw * ph];
    // Center the kernel at the origin with wrap-around so the convolution
    // output is aligned with the padded image.
    for ky in 0..kernel.size {
        for kx in 0..kernel.size {
            let ty = (ky + ph - r) % ph;
            let tx = (kx + pw - r) % pw;
            kbuf[ty * pw + tx] = kernel.data[ky * kernel.size + kx];
        }
    }
    fft2d_inplace(&mut field, pw, ph, false);
    fft2d_inplace(&mut kbuf, pw, ph, false);
    for (f, k) in field.iter_mut().zip(&kbuf) {
        *f *= k;
    }
    fft2d_inplace(&mut field, pw, ph, true);

    let mut out = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.push(field[(y + r) * pw + (x + r)].norm());
        }
    }
    out
}

/// Separable Gaussian smoothing with replicate borders, truncated at 3 sigma.
fn gaussian_smooth(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps = Vec::with_capacity(2 * radius as usize + 1);
    for t in -radius..=radius {
        taps.push((-(t * t) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    let mut rows = vec![0.0; src.len()];
    rows.par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, out_row)| {
            let row = &src[y * width..(y + 1) * width];
            for (x, out) in out_row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for (ti, t) in taps.iter().enumerate() {
                    let xi = (x as isize + ti as isize - radius).clamp(0, width as isize - 1);
                    sum += t * row[xi as usize];
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
                for (ti, t) in taps.iter().enumerate() {
                    let yi = (y as isize + ti as isize - radius).clamp(0, height as isize - 1);
                    sum += t * rows[yi as usize * width + x];
                }
                *out = sum;
            }
        });
    out
}

/// Per-pixel segment labels in `[0, segment_count)`, largest segment first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub segment_count: usize,
}

impl SegmentationMap {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// A single-segment map covering the whole image.
    pub fn single(width: usize, height: usize) -> Self {
        SegmentationMap {
            width,
            height,
            labels: vec![0; width * height],
            segment_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationConfig {
    pub gabor: GaborBankConfig,
    /// Requested cluster count; the result may have fewer segments.
    pub clusters: usize,
    pub replicates: usize,
    pub max_iter: usize,
    /// Scale applied to the z-scored coordinate features.
    pub coord_weight: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            gabor: GaborBankConfig::default(),
            clusters: 15,
            replicates: 5,
            max_iter: 500,
            coord_weight: 1.0,
        }
    }
}

/// Segment `img` into texture zones. Deterministic for a fixed `seed`
/// regardless of thread count.
pub fn segment_texture(
    img: &GrayImage,
    cfg: &SegmentationConfig,
    seed: u64,
) -> Result<SegmentationMap> {
    let n = img.width * img.height;
    if cfg.clusters < 1 {
        return Err(Error::InvalidInput("cluster count must be >= 1".into()));
    }
    if cfg.clusters > n {
        return Err(Error::InvalidInput(format!(
            "cluster count {} exceeds pixel count {}",
            cfg.clusters, n
        )));
    }
    if cfg.clusters == 1 {
        return Ok(SegmentationMap::single(img.width, img.height));
    }

    let bank = gabor_bank(&cfg.gabor, (img.width, img.height))?;
    let planes: Vec<Vec<f64>> = bank
        .par_iter()
        .map(|kernel| {
            let mag = gabor_magnitude(img, kernel);
            gaussian_smooth(&mag, img.width, img.height, kernel.wavelength / 2.0)
        })
        .collect();

    // z-score texture planes; remember whether any carries contrast.
    let dim = planes.len() + 2;
    let mut features = vec![0f32; n * dim];
    let mut any_texture = false;
    for (p, plane) in planes.iter().enumerate() {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 1e-12 {
            any_texture = true;
            for (i, v) in plane.iter().enumerate() {
                features[i * dim + p] = ((v - mean) / std) as f32;
            }
        }
    }
    // Coordinate features keep spatially coherent zones together. On a
    // textureless image they would *create* structure, so they are zeroed
    // there and the image collapses to one segment.
    if any_texture {
        for plane in 0..2 {
            let extent = if plane == 0 { img.width } else { img.height };
            let denom = (extent.max(2) - 1) as f64;
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let c = if plane == 0 { i % img.width } else { i / img.width };
                    c as f64 / denom
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std > 1e-12 {
                for (i, v) in vals.iter().enumerate() {
                    features[i * dim + planes.len() + plane] =
                        (cfg.coord_weight * (v - mean) / std) as f32;
                }
            }
        }
    }

    let labels = kmeans_best(&features, n, dim, cfg.clusters, cfg.replicates, cfg.max_iter, seed);
    Ok(relabel_by_size(img.width, img.height, labels))
}

/// Run `replicates` seeded k-means++ rounds and keep the lowest-inertia
/// labeling (ties break toward the earlier replicate).
fn kmeans_best(
    features: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    replicates: usize,
    max_iter: usize,
    seed: u64,
) -> Vec<u32> {
    let mut best: Option<(f64, Vec<u32>)> = None;
    for rep in 0..replicates.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
        let (inertia, labels) = kmeans_once(features, n, dim, k, max_iter, &mut rng);
        let better = match &best {
            None => true,
            Some((bi, _)) => inertia < *bi,
        };
        if better {
            best = Some((inertia, labels));
        }
    }
    best.unwrap().1
}

fn squared_dist(a: &[f32], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - y;
        sum += d * d;
    }
    sum
}

fn kmeans_once(
    features: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    max_iter: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<u32>) {
    let point = |i: usize| &features[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(point(first).iter().map(|v| *v as f64).collect());
    let mut d2: Vec<f64> = (0..n).map(|i| squared_dist(point(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c: Vec<f64> = point(idx).iter().map(|v| *v as f64).collect();
        for i in 0..n {
            let d = squared_dist(point(i), &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }

    let mut labels = vec![0u32; n];
    for _ in 0..max_iter.max(1) {
        // Assignment: pure per-point, deterministic under parallelism.
        let new_labels: Vec<u32> = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = point(i);
                let mut best = 0u32;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = squared_dist(p, centroid);
                    if d < best_d {
                        best_d = d;
                        best = c as u32;
                    }
                }
                best
            })
            .collect();
        let changed = new_labels != labels;
        labels = new_labels;

        // Sequential centroid update keeps the summation order fixed.
        let mut sums = vec![vec![0f64; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for i in 0..n {
            let c = labels[i] as usize;
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(point(i)) {
                *s += *v as f64;
            }
        }
        // Drop empty clusters and compact labels.
        if counts.iter().any(|c| *c == 0) {
            let mut remap = vec![u32::MAX; centroids.len()];
            let mut kept = Vec::new();
            for (c, count) in counts.iter().enumerate() {
                if *count > 0 {
                    remap[c] = kept.len() as u32;
                    kept.push(
                        sums[c]
                            .iter()
                            .map(|s| s / *count as f64)
                            .collect::<Vec<f64>>(),
                    );
                }
            }
            centroids = kept;
            for l in &mut labels {
                *l = remap[*l as usize];
            }
        } else {
            for (c, centroid) in centroids.iter_mut().enumerate() {
                for (dst, s) in centroid.iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .into_par_iter()
        .map(|i| squared_dist(point(i), &centroids[labels[i] as usize]))
        .sum();
    (inertia, labels)
}

/// Renumber labels by descending segment size (ties by original label).
fn relabel_by_size(width: usize, height: usize, labels: Vec<u32>) -> SegmentationMap {
    let k = labels.iter().map(|l| *l as usize).max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for l in &labels {
        sizes[*l as usize] += 1;
    }
    let mut order: Vec<usize> = (0..k).filter(|c| sizes[*c] > 0).collect();
    order.sort_by_key(|c| (std::cmp::Reverse(sizes[*c]), *c));
    let mut remap = vec![0u32; k];
    for (new, old) in order.iter().enumerate() {
        remap[*old] = new as u32;
    }
    let segment_count = order.len();
    SegmentationMap {
        width,
        height,
        labels: labels.into_iter().map(|l| remap[l as usize]).collect(),
        segment_count,
    }
}
