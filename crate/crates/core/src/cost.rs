//! Sparse disparity cost volume and per-pixel prior distributions.
//!
//! Feature candidates (minimum-eigenvalue corners) are matched across the
//! pair to seed per-segment disparity statistics; each segment then only
//! carries the labels inside its zonal range, which keeps the volume sparse
//! and the downstream marginalizations short. Scores are zero-normalized
//! cross-correlations of small templates, computed along scanline strips in
//! the frequency domain.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fft::{next_fast_size, PlanCache};
use crate::image::{DisparityMap, GrayImage};
use crate::segmentation::SegmentationMap;

/// Windows whose centered sum of squares falls at or below this are
/// treated as textureless and score zero. The bound sits just above the
/// 8-bit quantization floor (a full window of +/- half-quantum residue on
/// a `[0, 1]` scale sums to about 4e-5): below it a window carries no
/// usable contrast and normalized correlation would amplify rounding noise
/// into full-confidence scores. Shared with the spatial-domain reference
/// definition so both routes agree bit-for-bit on the rule.
pub const NCC_VAR_EPS: f64 = 1e-4;

/// A feature-point match: left pixel, integer disparity, NCC score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMatch {
    pub x: usize,
    pub y: usize,
    pub d: i32,
    pub score: f64,
}

/// Minimum-eigenvalue corner detection (structure tensor over a 3x3 window
/// of Sobel gradients), followed by greedy distance thinning.
///
/// Returns pixels whose smaller tensor eigenvalue strictly exceeds
/// `quality` times the global maximum, strongest first, no two closer than
/// `min_distance`.
pub fn detect_candidates(
    img: &GrayImage,
    quality: f64,
    min_distance: f64,
) -> Vec<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Vec::new();
    }
    let lambda = min_eigenvalue_map(img);
    let max = lambda.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let threshold = quality * max;
    let mut picks: Vec<(f64, usize)> = lambda
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > threshold)
        .map(|(i, l)| (*l, i))
        .collect();
    picks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let min_d2 = min_distance * min_distance;
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for (_, i) in picks {
        let (x, y) = (i % w, i / w);
        let ok = accepted.iter().all(|(ax, ay)| {
            let dx = *ax as f64 - x as f64;
            let dy = *ay as f64 - y as f64;
            dx * dx + dy * dy >= min_d2
        });
        if ok {
            accepted.push((x, y));
        }
    }
    accepted
}

/// Smaller eigenvalue of the 3x3-summed structure tensor at every pixel.
/// Exposed for tests that cross-check the detector against a literal
/// re-evaluation.
pub fn min_eigenvalue_map(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let i = y as usize * w + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let xi = (x + dx).clamp(0, w as isize - 1) as usize;
                    let yi = (y + dy).clamp(0, h as isize - 1) as usize;
                    let (a, b) = (gx[yi * w + xi], gy[yi * w + xi]);
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let half_tr = 0.5 * (sxx + syy);
            let det = 0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy;
            out[y as usize * w + x as usize] = half_tr - det.sqrt();
        }
    }
    out
}

/// Zero-normalized cross-correlation of two equal-size windows, evaluated
/// directly. Shared by candidate matching and by test oracles.
pub fn zncc_windows(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let var_a = saa - sa * sa / n;
    let var_b = sbb - sb * sb / n;
    if var_a <= NCC_VAR_EPS || var_b <= NCC_VAR_EPS {
        return 0.0;
    }
    let num = sab - sa * sb / n;
    (num / (var_a * var_b).sqrt()).clamp(0.0, 1.0)
}

fn gather_window(img: &GrayImage, cx: usize, cy: usize, half: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((2 * half + 1) * (2 * half + 1));
    for dy in 0..=2 * half {
        for dx in 0..=2 * half {
            out.push(img.get(cx - half + dx, cy - half + dy));
        }
    }
    out
}

/// Match candidate points against the right image over `d_range` with a
/// windowed NCC. A match is kept only when its best score reaches
/// `min_score` and beats the runner-up disparity by at least `margin`.
pub fn match_candidates(
    left: &GrayImage,
    right: &GrayImage,
    points: &[(usize, usize)],
    d_range: (i32, i32),
    window: usize,
    min_score: f64,
    margin: f64,
) -> Vec<CandidateMatch> {
    assert!(window % 2 == 1, "match window must be odd");
    let half = window / 2;
    let (w, h) = (left.width, left.height);
    points
        .par_iter()
        .filter_map(|&(x, y)| {
            if x < half || y < half || x + half >= w || y + half >= h {
                return None;
            }
            let template = gather_window(left, x, y, half);
            let mut best: Option<(f64, i32)> = None;
            let mut second = f64::NEG_INFINITY;
            for d in d_range.0..=d_range.1 {
                let u = x as i64 - d as i64;
                if u < half as i64 || u + half as i64 >= w as i64 {
                    continue;
                }
                let patch = gather_window(right, u as usize, y, half);
                let score = zncc_windows(&template, &patch);
                match best {
                    None => best = Some((score, d)),
                    Some((bs, _)) if score > bs => {
                        second = bs;
                        best = Some((score, d));
                    }
                    Some(_) => second = second.max(score),
                }
            }
            let (score, d) = best?;
            if score >= min_score && score - second >= margin {
                Some(CandidateMatch { x, y, d, score })
            } else {
                None
            }
        })
        .collect()
}

/// Disparity statistics and search range for one segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRange {
    /// Mean of the segment's matched disparities; NaN when it had none.
    pub mu: f64,
    /// Population standard deviation; NaN when the segment had no matches.
    pub sigma: f64,
    pub match_count: usize,
    pub lo: i32,
    pub hi: i32,
}

/// Per-segment zonal ranges, with a global fallback for segments that
/// attracted no feature matches.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonalStats {
    pub segments: Vec<SegmentRange>,
    pub d_min: i32,
    pub d_max: i32,
}

impl ZonalStats {
    #[inline]
    pub fn range_for(&self, segment: u32) -> (i32, i32) {
        let s = &self.segments[segment as usize];
        (s.lo, s.hi)
    }
}

/// Clip `[lo, hi]` to the global range and widen it, alternating low/high,
/// until it spans at least `min_width` labels.
fn clip_and_widen(mut lo: i32, mut hi: i32, d_min: i32, d_max: i32, min_width: i32) -> (i32, i32) {
    lo = lo.clamp(d_min, d_max);
    hi = hi.clamp(d_min, d_max);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let mut grow_low = true;
    while hi - lo + 1 < min_width {
        if grow_low && lo > d_min {
            lo -= 1;
        } else if hi < d_max {
            hi += 1;
        } else if lo > d_min {
            lo -= 1;
        } else {
            break; // the whole label space is narrower than min_width
        }
        grow_low = !grow_low;
    }
    (lo, hi)
}

/// Compute `[round(mu - sigma), round(mu + sigma)]` per segment from its
/// matches. Segments without matches inherit the span of all matches; with
/// no matches anywhere, every segment gets the full `[d_min, d_max]`.
pub fn zonal_ranges(
    seg: &SegmentationMap,
    matches: &[CandidateMatch],
    d_min: i32,
    d_max: i32,
) -> ZonalStats {
    const MIN_WIDTH: i32 = 3;
    let k = seg.segment_count;
    let mut per_segment: Vec<Vec<f64>> = vec![Vec::new(); k];
    for m in matches {
        let label = seg.label(m.x, m.y) as usize;
        per_segment[label].push(m.d as f64);
    }
    let global = if matches.is_empty() {
        (d_min, d_max)
    } else {
        let lo = matches.iter().map(|m| m.d).min().unwrap();
        let hi = matches.iter().map(|m| m.d).max().unwrap();
        clip_and_widen(lo, hi, d_min, d_max, MIN_WIDTH)
    };
    let segments = per_segment
        .into_iter()
        .map(|ds| {
            if ds.is_empty() {
                SegmentRange {
                    mu: f64::NAN,
                    sigma: f64::NAN,
                    match_count: 0,
                    lo: global.0,
                    hi: global.1,
                }
            } else {
                let n = ds.len() as f64;
                let mu = ds.iter().sum::<f64>() / n;
                let var = ds.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
                let sigma = var.sqrt();
                let (lo, hi) = clip_and_widen(
                    (mu - sigma).round() as i32,
                    (mu + sigma).round() as i32,
                    d_min,
                    d_max,
                    MIN_WIDTH,
                );
                SegmentRange {
                    mu,
                    sigma,
                    match_count: ds.len(),
                    lo,
                    hi,
                }
            }
        })
        .collect();
    ZonalStats {
        segments,
        d_min,
        d_max,
    }
}

/// Per-pixel contiguous disparity supports with similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCostVolume {
    pub width: usize,
    pub height: usize,
    pub d_min: i32,
    pub d_max: i32,
    lo: Vec<i32>,
    offsets: Vec<u32>,
    scores: Vec<f64>,
}

impl SparseCostVolume {
    /// Assemble from per-pixel `(lo, scores)` pairs.
    pub fn from_parts(
        width: usize,
        height: usize,
        d_min: i32,
        d_max: i32,
        parts: Vec<(i32, Vec<f64>)>,
    ) -> Result<Self> {
        if parts.len() != width * height {
            return Err(Error::InvalidInput("support count mismatch".into()));
        }
        let mut lo = Vec::with_capacity(parts.len());
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut scores = Vec::new();
        offsets.push(0u32);
        for (pl, ps) in parts {
            if ps.is_empty() || pl < d_min || pl + ps.len() as i32 - 1 > d_max {
                return Err(Error::InvalidInput(format!(
                    "support [{pl}, {}] outside [{d_min}, {d_max}]",
                    pl + ps.len() as i32 - 1
                )));
            }
            if ps.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::InvalidInput("scores must be finite and >= 0".into()));
            }
            lo.push(pl);
            scores.extend_from_slice(&ps);
            offsets.push(scores.len() as u32);
        }
        Ok(SparseCostVolume {
            width,
            height,
            d_min,
            d_max,
            lo,
            offsets,
            scores,
        })
    }

    #[inline]
    pub fn label_lo(&self, pixel: usize) -> i32 {
        self.lo[pixel]
    }

    #[inline]
    pub fn scores(&self, pixel: usize) -> &[f64] {
        &self.scores[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }

    #[inline]
    pub fn support_len(&self, pixel: usize) -> usize {
        (self.offsets[pixel + 1] - self.offsets[pixel]) as usize
    }

    /// Winner-take-all disparity: per-pixel argmax score, ties toward the
    /// smaller label.
    pub fn argmax_map(&self) -> DisparityMap {
        let data = (0..self.width * self.height)
            .map(|p| {
                let scores = self.scores(p);
                let mut best = 0usize;
                for (i, s) in scores.iter().enumerate() {
                    if *s > scores[best] {
                        best = i;
                    }
                }
                (self.lo[p] + best as i32) as f32
            })
            .collect();
        DisparityMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Binary cache: magic, dims, range, then per-pixel `lo`, `len`, scores.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out: Vec<u8> = Vec::with_capacity(24 + self.scores.len() * 8);
        out.extend_from_slice(b"FGSV");
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.d_min.to_le_bytes());
        out.extend_from_slice(&self.d_max.to_le_bytes());
        for p in 0..self.width * self.height {
            out.extend_from_slice(&self.lo[p].to_le_bytes());
            out.extend_from_slice(&(self.support_len(p) as u32).to_le_bytes());
            for s in self.scores(p) {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated cost volume cache",
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != b"FGSV" {
            return Err(Error::format(path, "bad cost-volume magic"));
        }
        let width = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d_min = i32::from_le_bytes(take(4)?.try_into().unwrap());
        let d_max = i32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut parts = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let lo = i32::from_le_bytes(take(4)?.try_into().unwrap());
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut scores = Vec::with_capacity(len);
            for _ in 0..len {
                scores.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            parts.push((lo, scores));
        }
        SparseCostVolume::from_parts(width, height, d_min, d_max, parts)
    }
}

/// Strip-correlation engine: for one pixel, the template/strip rows are
/// cross-correlated via FFT, accumulated in the frequency domain, and
/// normalized with directly summed window moments.
struct NccEngine<'a> {
    left: &'a GrayImage,
    right: &'a GrayImage,
    half: usize,
    /// 3x3 (or template-size) window sums over the right image, valid on
    /// the interior; used for ZNCC normalization.
    right_sum: Vec<f64>,
    right_sumsq: Vec<f64>,
    plans: PlanCache,
}

/// Reusable per-worker scratch buffers.
#[derive(Default)]
struct NccScratch {
    a: Vec<Complex<f64>>,
    b: Vec<Complex<f64>>,
    acc: Vec<Complex<f64>>,
}

impl<'a> NccEngine<'a> {
    fn new(left: &'a GrayImage, right: &'a GrayImage, template: usize, max_range: usize) -> Self {
        assert!(template % 2 == 1, "template size must be odd");
        let half = template / 2;
        let (right_sum, right_sumsq) = window_sums(right, template);
        // Strip width never exceeds range + 2*half; plan every fast size
        // the per-pixel clipping can produce.
        let max_strip = max_range + 2 * half;
        let sizes: std::collections::BTreeSet<usize> = (1..=max_strip + template)
            .map(next_fast_size)
            .collect();
        NccEngine {
            left,
            right,
            half,
            right_sum,
            right_sumsq,
            plans: PlanCache::new(sizes),
        }
    }

    /// ZNCC scores for `labels = lo..=hi` at pixel `(x, y)`. Labels whose
    /// left or right window leaves its frame score zero.
    fn scores_at(
        &self,
        x: usize,
        y: usize,
        lo: i32,
        hi: i32,
        scratch: &mut NccScratch,
    ) -> Vec<f64> {
        let len = (hi - lo + 1) as usize;
        let mut out = vec![0.0f64; len];
        let (w, h) = (self.right.width, self.right.height);
        let half = self.half;
        let t = 2 * half + 1;
        let n = (t * t) as f64;

        // The left template must be fully inside the left frame.
        if x < half || y < half || x + half >= self.left.width || y + half >= self.left.height {
            return out;
        }
        // Valid labels keep the right window inside the right frame.
        let u_min = half as i64;
        let u_max = w as i64 - 1 - half as i64;
        if y < half || y + half >= h {
            return out;
        }
        let dv_lo = (x as i64 - u_max).max(lo as i64);
        let dv_hi = (x as i64 - u_min).min(hi as i64);
        if dv_lo > dv_hi {
            return out;
        }

        // Template moments, summed directly.
        let (mut st, mut stt) = (0.0, 0.0);
        for dy in 0..t {
            for dx in 0..t {
                let v = self.left.get(x - half + dx, y - half + dy);
                st += v;
                stt += v * v;
            }
        }
        let var_t = stt - st * st / n;
        if var_t <= NCC_VAR_EPS {
            return out;
        }

        // Frequency-domain cross term over the strip of candidate windows.
        let strip_x0 = (x as i64 - dv_hi) as usize - half;
        let strip_x1 = (x as i64 - dv_lo) as usize + half;
        let strip_w = strip_x1 - strip_x0 + 1;
        let fft_len = next_fast_size(strip_w + t - 1);
        let fwd = self.plans.forward(fft_len);
        let inv = self.plans.inverse(fft_len);

        scratch.acc.clear();
        scratch.acc.resize(fft_len, Complex::default());
        for row in 0..t {
            let ry = y - half + row;
            scratch.a.clear();
            scratch.a.resize(fft_len, Complex::default());
            for i in 0..strip_w {
                scratch.a[i] = Complex::new(self.right.get(strip_x0 + i, ry), 0.0);
            }
            scratch.b.clear();
            scratch.b.resize(fft_len, Complex::default());
            for i in 0..t {
                // Reversed template row turns convolution into correlation.
                scratch.b[i] = Complex::new(self.left.get(x + half - i, ry), 0.0);
            }
            fwd.process(&mut scratch.a);
            fwd.process(&mut scratch.b);
            for (acc, (sa, sb)) in scratch
                .acc
                .iter_mut()
                .zip(scratch.a.iter().zip(&scratch.b))
            {
                *acc += sa * sb;
            }
        }
        inv.process(&mut scratch.acc);
        let scale = 1.0 / fft_len as f64;

        for d in dv_lo..=dv_hi {
            let u = (x as i64 - d) as usize;
            let sp = self.right_sum[y * w + u];
            let spp = self.right_sumsq[y * w + u];
            let var_p = spp - sp * sp / n;
            if var_p <= NCC_VAR_EPS {
                continue;
            }
            // Correlation lag: window start minus strip start, offset by
            // the template length for the convolution alignment.
            let j = (u - half) - strip_x0;
            let stp = scratch.acc[j + t - 1].re * scale;
            let num = stp - st * sp / n;
            out[(d - lo as i64) as usize] = (num / (var_t * var_p).sqrt()).clamp(0.0, 1.0);
        }
        out
    }
}

/// True when every label in `[lo, hi]` at pixel `(x, y)` has its template
/// or right-image window clipped by a frame edge: such a pixel carries no
/// measured similarity at all (its scores are structurally zero) and its
/// estimate is pure smoothing. Dimensions are of the left/right pair.
pub fn support_frame_clipped(
    width: usize,
    height: usize,
    template: usize,
    x: usize,
    y: usize,
    lo: i32,
    hi: i32,
) -> bool {
    let half = (template / 2) as i64;
    let (x, y) = (x as i64, y as i64);
    if x < half || y < half || x + half >= width as i64 || y + half >= height as i64 {
        return true;
    }
    let u_min = half;
    let u_max = width as i64 - 1 - half;
    let dv_lo = (x - u_max).max(lo as i64);
    let dv_hi = (x - u_min).min(hi as i64);
    dv_lo > dv_hi
}

/// Sliding window sum and sum-of-squares over `img`, window `t x t`
/// centered, valid on the interior (border entries are never read).
fn window_sums(img: &GrayImage, t: usize) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let half = t / 2;
    let mut row_s = vec![0.0f64; w * h];
    let mut row_q = vec![0.0f64; w * h];
    for y in 0..h {
        for x in half..w.saturating_sub(half) {
            let (mut s, mut q) = (0.0, 0.0);
            for dx in 0..t {
                let v = img.get(x - half + dx, y);
                s += v;
                q += v * v;
            }
            row_s[y * w + x] = s;
            row_q[y * w + x] = q;
        }
    }
    let mut sum = vec![0.0f64; w * h];
    let mut sumsq = vec![0.0f64; w * h];
    for y in half..h.saturating_sub(half) {
        for x in half..w.saturating_sub(half) {
            let (mut s, mut q) = (0.0, 0.0);
            for dy in 0..t {
                s += row_s[(y - half + dy) * w + x];
                q += row_q[(y - half + dy) * w + x];
            }
            sum[y * w + x] = s;
            sumsq[y * w + x] = q;
        }
    }
    (sum, sumsq)
}

/// ZNCC scores for a single pixel over `labels`, via the frequency-domain
/// strip engine. For whole-image work use [`build_cost_volume`], which
/// shares the FFT plans and window sums across pixels.
pub fn ncc_scores(
    left: &GrayImage,
    right: &GrayImage,
    pixel: (usize, usize),
    labels: (i32, i32),
    template: usize,
) -> Vec<f64> {
    let range = (labels.1 - labels.0).max(0) as usize + 1;
    let engine = NccEngine::new(left, right, template, range);
    let mut scratch = NccScratch::default();
    engine.scores_at(pixel.0, pixel.1, labels.0, labels.1, &mut scratch)
}

/// Build the sparse cost volume: each pixel's support is its segment's
/// zonal range, scored with the frequency-domain ZNCC engine.
pub fn build_cost_volume(
    left: &GrayImage,
    right: &GrayImage,
    seg: &SegmentationMap,
    stats: &ZonalStats,
    template: usize,
) -> Result<SparseCostVolume> {
    if left.width != right.width
        || left.height != right.height
        || left.width != seg.width
        || left.height != seg.height
    {
        return Err(Error::InvalidInput(
            "left/right/segmentation dimensions must agree".into(),
        ));
    }
    let max_range = stats
        .segments
        .iter()
        .map(|s| (s.hi - s.lo) as usize + 1)
        .max()
        .unwrap_or(1);
    let engine = NccEngine::new(left, right, template, max_range);
    let (w, h) = (left.width, left.height);
    let parts: Vec<(i32, Vec<f64>)> = (0..w * h)
        .into_par_iter()
        .map_init(NccScratch::default, |scratch, p| {
            let (x, y) = (p % w, p / w);
            let (lo, hi) = stats.range_for(seg.label(x, y));
            (lo, engine.scores_at(x, y, lo, hi, scratch))
        })
        .collect();
    SparseCostVolume::from_parts(w, h, stats.d_min, stats.d_max, parts)
}

/// Per-pixel prior probability vectors aligned with the volume supports.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorField {
    pub width: usize,
    pub height: usize,
    pub d_min: i32,
    pub d_max: i32,
    lo: Vec<i32>,
    offsets: Vec<u32>,
    probs: Vec<f64>,
}

/// Normalize one pixel's scores into a probability vector: proportional to
/// the scores, or uniform when they sum to zero.
pub fn prior_from_cost(vol: &SparseCostVolume, pixel: usize) -> Vec<f64> {
    let scores = vol.scores(pixel);
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}

impl PriorField {
    pub fn from_volume(vol: &SparseCostVolume) -> Self {
        let n = vol.width * vol.height;
        let mut probs = Vec::with_capacity(vol.scores.len());
        for p in 0..n {
            probs.extend(prior_from_cost(vol, p));
        }
        PriorField {
            width: vol.width,
            height: vol.height,
            d_min: vol.d_min,
            d_max: vol.d_max,
            lo: vol.lo.clone(),
            offsets: vol.offsets.clone(),
            probs,
        }
    }

    /// Build directly from per-pixel `(lo, probabilities)` pairs; vectors
    /// are renormalized defensively.
    pub fn from_parts(
        width: usize,
        height: usize,
        d_min: i32,
        d_max: i32,
        parts: Vec<(i32, Vec<f64>)>,
    ) -> Result<Self> {
        let vol = SparseCostVolume::from_parts(width, height, d_min, d_max, parts)?;
        Ok(PriorField::from_volume(&vol))
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn label_lo(&self, pixel: usize) -> i32 {
        self.lo[pixel]
    }

    #[inline]
    pub fn probs(&self, pixel: usize) -> &[f64] {
        &self.probs[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }

    #[inline]
    pub fn support_len(&self, pixel: usize) -> usize {
        (self.offsets[pixel + 1] - self.offsets[pixel]) as usize
    }

    /// Prior argmax disparity (the "initial" map), ties toward smaller d.
    pub fn argmax_map(&self) -> DisparityMap {
        let data = (0..self.pixel_count())
            .map(|p| {
                let probs = self.probs(p);
                let mut best = 0usize;
                for (i, s) in probs.iter().enumerate() {
                    if *s > probs[best] {
                        best = i;
                    }
                }
                (self.lo[p] + best as i32) as f32
            })
            .collect();
        DisparityMap {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    // ----- candidate detection -----

    #[test]
    fn constant_image_has_no_candidates() {
        let img = GrayImage::constant(16, 16, 0.5);
        assert!(detect_candidates(&img, 0.01, 3.0).is_empty());
    }

    #[test]
    fn white_pixel_candidates_are_adjacent() {
        let mut data = vec![0.0; 121];
        data[5 * 11 + 5] = 1.0;
        let img = GrayImage::new(11, 11, data).unwrap();
        let picks = detect_candidates(&img, 0.5, 0.9);
        assert!(!picks.is_empty());
        for (x, y) in &picks {
            let dx = (*x as i64 - 5).abs();
            let dy = (*y as i64 - 5).abs();
            assert!(dx <= 1 && dy <= 1, "candidate ({x},{y}) not adjacent");
        }
        // Cross-check against a literal recomputation of the eigenvalue map.
        let lambda = min_eigenvalue_map(&img);
        let max = lambda.iter().cloned().fold(0.0f64, f64::max);
        for (x, y) in &picks {
            assert!(lambda[y * 11 + x] > 0.5 * max);
        }
    }

    #[test]
    fn diagonal_min_distance_keeps_one() {
        let img = synth::value_noise(20, 20, 4, 3);
        let picks = detect_candidates(&img, 0.01, 40.0);
        assert!(picks.len() <= 1);
    }

    // ----- candidate matching -----

    #[test]
    fn shifted_pair_matches_recover_shift() {
        let (left, right, _) = synth::constant_shift_pair(64, 48, 5, 21);
        let pts = detect_candidates(&left, 0.05, 4.0);
        assert!(pts.len() >= 5, "need candidates, got {}", pts.len());
        let matches = match_candidates(&left, &right, &pts, (0, 15), 11, 0.8, 0.05);
        assert!(!matches.is_empty());
        for m in &matches {
            assert_eq!(m.d, 5, "candidate at ({}, {})", m.x, m.y);
        }
    }

    #[test]
    fn out_of_frame_candidate_dropped() {
        let (left, right, _) = synth::constant_shift_pair(32, 20, 5, 2);
        // x = 2: the left window (half 5) hangs off the left edge.
        let matches = match_candidates(&left, &right, &[(2, 10)], (0, 10), 11, 0.0, 0.0);
        assert!(matches.is_empty());
        // x = 7: the left window fits but every right window is off-frame
        // for d >= 2.
        let matches = match_candidates(&left, &right, &[(7, 10)], (3, 10), 11, 0.0, 0.0);
        assert!(matches.is_empty());
    }

    #[test]
    fn periodic_texture_rejected_by_margin() {
        // Vertical stripes of period 4: NCC is 1.0 at the true shift and at
        // shift +/- 4, so the runner-up margin kills the match.
        let (w, h) = (48, 16);
        let stripes = |x0: usize| -> GrayImage {
            let data = (0..w * h)
                .map(|i| if ((i % w) + x0) % 4 < 2 { 0.2 } else { 0.8 })
                .collect();
            GrayImage::new(w, h, data).unwrap()
        };
        let left = stripes(0);
        let right = stripes(4); // true shift 4, aliases at 0 and 8
        let matches = match_candidates(&left, &right, &[(24, 8)], (0, 12), 11, 0.8, 0.05);
        assert!(matches.is_empty());
    }

    // ----- zonal statistics -----

    fn seg_all_zero(w: usize, h: usize) -> SegmentationMap {
        SegmentationMap::single(w, h)
    }

    fn mk_match(x: usize, y: usize, d: i32) -> CandidateMatch {
        CandidateMatch {
            x,
            y,
            d,
            score: 1.0,
        }
    }

    #[test]
    fn zonal_hand_arithmetic() {
        let seg = seg_all_zero(10, 1);
        let matches = vec![mk_match(1, 0, 4), mk_match(2, 0, 5), mk_match(3, 0, 6)];
        let stats = zonal_ranges(&seg, &matches, 0, 20);
        let s = &stats.segments[0];
        assert!((s.mu - 5.0).abs() < 1e-12);
        assert!((s.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.lo, s.hi), (4, 6));
    }

    #[test]
    fn single_match_widens_to_three() {
        let seg = seg_all_zero(4, 1);
        let stats = zonal_ranges(&seg, &[mk_match(0, 0, 7)], 0, 20);
        assert_eq!((stats.segments[0].lo, stats.segments[0].hi), (6, 8));
    }

    #[test]
    fn widen_respects_bounds() {
        let seg = seg_all_zero(4, 1);
        let stats = zonal_ranges(&seg, &[mk_match(0, 0, 0)], 0, 20);
        assert_eq!((stats.segments[0].lo, stats.segments[0].hi), (0, 2));
        let stats = zonal_ranges(&seg, &[mk_match(0, 0, 20)], 0, 20);
        assert_eq!((stats.segments[0].lo, stats.segments[0].hi), (18, 20));
    }

    #[test]
    fn empty_segment_inherits_global_range() {
        let mut seg = seg_all_zero(4, 2);
        seg.labels[0] = 1;
        seg.segment_count = 2;
        // All matches land in segment 0; segment 1 inherits their span.
        let matches = vec![mk_match(1, 1, 4), mk_match(2, 1, 9)];
        let stats = zonal_ranges(&seg, &matches, 0, 30);
        assert_eq!((stats.segments[1].lo, stats.segments[1].hi), (4, 9));
        assert_eq!(stats.segments[1].match_count, 0);
    }

    #[test]
    fn no_matches_fall_back_to_full_range() {
        let seg = seg_all_zero(4, 1);
        let stats = zonal_ranges(&seg, &[], 0, 12);
        assert_eq!((stats.segments[0].lo, stats.segments[0].hi), (0, 12));
    }

    // ----- NCC scores: frequency path vs spatial oracle -----

    /// Literal spatial-domain reference: same zero-variance rule and clamp.
    fn spatial_scores(
        left: &GrayImage,
        right: &GrayImage,
        (x, y): (usize, usize),
        (lo, hi): (i32, i32),
        template: usize,
    ) -> Vec<f64> {
        let half = template / 2;
        let mut out = vec![0.0; (hi - lo + 1) as usize];
        if x < half || y < half || x + half >= left.width || y + half >= left.height {
            return out;
        }
        let t = gather_window(left, x, y, half);
        for d in lo..=hi {
            let u = x as i64 - d as i64;
            if u < half as i64
                || u + half as i64 >= right.width as i64
                || y < half
                || y + half >= right.height
            {
                continue;
            }
            let p = gather_window(right, u as usize, y, half);
            out[(d - lo) as usize] = zncc_windows(&t, &p);
        }
        out
    }

    #[test]
    fn identical_patches_score_one() {
        let img = synth::value_noise(32, 16, 4, 9);
        let s = ncc_scores(&img, &img, (10, 8), (0, 0), 3);
        assert!((s[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn negated_patch_clamps_to_zero() {
        let img = synth::value_noise(32, 16, 4, 9);
        let neg = GrayImage {
            width: 32,
            height: 16,
            data: img.data.iter().map(|v| 1.0 - v).collect(),
        };
        let s = ncc_scores(&img, &neg, (10, 8), (0, 0), 3);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn fft_matches_spatial_oracle() {
        let left = synth::value_noise(48, 24, 5, 31);
        let right = synth::value_noise(48, 24, 5, 32);
        for &(x, y, lo, hi) in &[
            (20usize, 10usize, 0i32, 12i32),
            (40, 5, -3, 9),
            (6, 20, 0, 4),
            (47, 12, 2, 30),
            (1, 1, 0, 3),
        ] {
            let fast = ncc_scores(&left, &right, (x, y), (lo, hi), 3);
            let slow = spatial_scores(&left, &right, (x, y), (lo, hi), 3);
            for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
                assert!(
                    (a - b).abs() < 1e-10,
                    "pixel ({x},{y}) label {}: fft {a} vs spatial {b}",
                    lo + i as i32
                );
            }
        }
    }

    #[test]
    fn zero_variance_template_scores_zero() {
        let left = GrayImage::constant(16, 8, 0.5);
        let right = synth::value_noise(16, 8, 4, 1);
        let s = ncc_scores(&left, &right, (8, 4), (0, 4), 3);
        assert!(s.iter().all(|v| *v == 0.0));
    }

    // ----- cost volume -----

    #[test]
    fn volume_support_width_matches_zone() {
        let (left, right, _) = synth::constant_shift_pair(24, 10, 3, 4);
        let seg = seg_all_zero(24, 10);
        let stats = zonal_ranges(&seg, &[mk_match(10, 5, 3)], 0, 10);
        let vol = build_cost_volume(&left, &right, &seg, &stats, 3).unwrap();
        for p in 0..24 * 10 {
            assert_eq!(vol.support_len(p), 3);
            assert_eq!(vol.label_lo(p), 2);
        }
    }

    #[test]
    fn left_border_pixel_scores_all_zero() {
        let (left, right, _) = synth::constant_shift_pair(24, 10, 3, 4);
        let seg = seg_all_zero(24, 10);
        let stats = zonal_ranges(&seg, &[mk_match(10, 5, 3)], 0, 10);
        let vol = build_cost_volume(&left, &right, &seg, &stats, 3).unwrap();
        assert!(vol.scores(0).iter().all(|s| *s == 0.0));
        assert!(vol.scores(5 * 24).iter().all(|s| *s == 0.0));
    }

    #[test]
    fn shifted_pair_argmax_recovers_shift() {
        let (left, right, _) = synth::constant_shift_pair(64, 48, 5, 77);
        let seg = seg_all_zero(64, 48);
        let stats = zonal_ranges(
            &seg,
            &[mk_match(20, 20, 5), mk_match(40, 30, 5), mk_match(30, 10, 5)],
            0,
            15,
        );
        let vol = build_cost_volume(&left, &right, &seg, &stats, 3).unwrap();
        let wta = vol.argmax_map();
        let mut good = 0usize;
        let mut total = 0usize;
        for y in 6..42 {
            for x in 6..58 {
                total += 1;
                if wta.get(x, y) == 5.0 {
                    good += 1;
                }
            }
        }
        assert!(
            good as f64 / total as f64 >= 0.99,
            "WTA correct on {good}/{total}"
        );
    }

    #[test]
    fn volume_binary_roundtrip() {
        let (left, right, _) = synth::constant_shift_pair(20, 8, 2, 6);
        let seg = seg_all_zero(20, 8);
        let stats = zonal_ranges(&seg, &[mk_match(9, 4, 2)], 0, 6);
        let vol = build_cost_volume(&left, &right, &seg, &stats, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.fgsv");
        vol.write_binary(&path).unwrap();
        assert_eq!(SparseCostVolume::read_binary(&path).unwrap(), vol);
    }

    // ----- priors -----

    fn tiny_volume(scores: Vec<Vec<f64>>) -> SparseCostVolume {
        let n = scores.len();
        SparseCostVolume::from_parts(
            n,
            1,
            0,
            10,
            scores.into_iter().map(|s| (0, s)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prior_uniform_and_proportional() {
        let vol = tiny_volume(vec![
            vec![1.0, 1.0, 1.0, 1.0],
            vec![2.0, 1.0, 1.0],
            vec![0.0, 0.0],
        ]);
        assert_eq!(prior_from_cost(&vol, 0), vec![0.25; 4]);
        assert_eq!(prior_from_cost(&vol, 1), vec![0.5, 0.25, 0.25]);
        assert_eq!(prior_from_cost(&vol, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn prior_field_sums_to_one() {
        let (left, right, _) = synth::constant_shift_pair(30, 12, 4, 8);
        let seg = seg_all_zero(30, 12);
        let stats = zonal_ranges(&seg, &[mk_match(15, 6, 4)], 0, 10);
        let vol = build_cost_volume(&left, &right, &seg, &stats, 3).unwrap();
        let prior = PriorField::from_volume(&vol);
        for p in 0..prior.pixel_count() {
            let sum: f64 = prior.probs(p).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(prior.probs(p).iter().all(|v| *v >= 0.0));
        }
    }
}
