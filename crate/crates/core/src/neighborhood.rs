//! Kernel-driven variable neighborhoods.
//!
//! Each pixel owns one dependency factor; the variables attached to it are
//! chosen by thresholding an edge-preserving filter kernel (bilateral or
//! guided) at a coefficient percentile. Strong intensity edges suppress the
//! range term, so factors do not reach across object boundaries, yielding a
//! non-symmetric, irregular, data-driven neighborhood system.

use rayon::prelude::*;

use crate::image::GrayImage;

/// One filter kernel evaluated around a center pixel. Offsets are relative
/// `(dx, dy)` positions clipped to the image; `(0, 0)` is always present.
#[derive(Debug, Clone)]
pub struct KernelPatch {
    pub center: (usize, usize),
    pub offsets: Vec<(i32, i32)>,
    pub coefficients: Vec<f64>,
}

impl KernelPatch {
    /// Index of the center offset `(0, 0)`.
    pub fn center_index(&self) -> usize {
        self.offsets
            .iter()
            .position(|&o| o == (0, 0))
            .expect("kernel patch must contain its center")
    }
}

/// Which edge-preserving kernel drives neighbor selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    Bilateral,
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodConfig {
    pub mode: NeighborMode,
    /// Bilateral window side (odd).
    pub bilateral_size: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    /// Guided-filter window radius; the window side is `2r + 1`.
    pub guided_radius: usize,
    pub guided_epsilon: f64,
    /// Percentile cut-off in (0, 100); coefficients at or above it survive.
    pub alpha: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        NeighborhoodConfig {
            mode: NeighborMode::Bilateral,
            bilateral_size: 7,
            sigma_spatial: 3.0,
            sigma_range: 0.1,
            guided_radius: 3,
            guided_epsilon: 0.01,
            alpha: 97.0,
        }
    }
}

/// Bilateral kernel around `center`: a spatial Gaussian attenuated by a
/// range Gaussian on intensity differences. The window is clipped at the
/// image border, not padded.
pub fn bilateral_kernel(
    img: &GrayImage,
    center: (usize, usize),
    size: usize,
    sigma_s: f64,
    sigma_r: f64,
) -> KernelPatch {
    debug_assert!(size % 2 == 1 && sigma_s > 0.0 && sigma_r > 0.0);
    let (cx, cy) = center;
    let half = (size / 2) as i32;
    let center_val = img.get(cx, cy);
    let inv_2s2 = 1.0 / (2.0 * sigma_s * sigma_s);
    let inv_2r2 = 1.0 / (2.0 * sigma_r * sigma_r);
    let mut offsets = Vec::new();
    let mut coefficients = Vec::new();
    for dy in -half..=half {
        let y = cy as i32 + dy;
        if y < 0 || y >= img.height as i32 {
            continue;
        }
        for dx in -half..=half {
            let x = cx as i32 + dx;
            if x < 0 || x >= img.width as i32 {
                continue;
            }
            let spatial = (dx * dx + dy * dy) as f64 * inv_2s2;
            let diff = center_val - img.get(x as usize, y as usize);
            let range = diff * diff * inv_2r2;
            offsets.push((dx, dy));
            coefficients.push((-spatial - range).exp());
        }
    }
    KernelPatch {
        center,
        offsets,
        coefficients,
    }
}

/// Guided-filter kernel around `center`, evaluated literally:
///
/// `W(m,n) = 1/|w|^2 * sum_{(k,l) in w} (1 + (I(m,n)-mu)(I(k,l)-mu)/(var+eps))`
///
/// with `mu`/`var` the window mean and variance. The inner sum of centered
/// values cancels analytically, so coefficients come out uniform at
/// `1/|w|`; kernels therefore select the whole window and produce larger
/// factor neighborhoods than the bilateral mode.
pub fn guided_kernel(
    img: &GrayImage,
    center: (usize, usize),
    radius: usize,
    eps: f64,
) -> KernelPatch {
    debug_assert!(eps > 0.0);
    let (cx, cy) = center;
    let r = radius as i32;
    let mut window = Vec::new();
    let mut offsets = Vec::new();
    for dy in -r..=r {
        let y = cy as i32 + dy;
        if y < 0 || y >= img.height as i32 {
            continue;
        }
        for dx in -r..=r {
            let x = cx as i32 + dx;
            if x < 0 || x >= img.width as i32 {
                continue;
            }
            offsets.push((dx, dy));
            window.push(img.get(x as usize, y as usize));
        }
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var + eps;
    let coefficients = window
        .iter()
        .map(|&value| {
            let mut sum = 0.0;
            for &other in &window {
                sum += 1.0 + (value - mean) * (other - mean) / denom;
            }
            sum / (n * n)
        })
        .collect();
    KernelPatch {
        center,
        offsets,
        coefficients,
    }
}

/// Linear-interpolation percentile of `values` (NumPy "linear" convention).
fn percentile(values: &[f64], alpha: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = alpha / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Keep the offsets whose coefficient reaches the `alpha`-th percentile of
/// the patch. Ties at the cut-off are kept; the center always survives.
pub fn select_neighbors(kernel: &KernelPatch, alpha: f64) -> Vec<(i32, i32)> {
    debug_assert!(alpha > 0.0 && alpha < 100.0);
    let cutoff = percentile(&kernel.coefficients, alpha);
    let mut selected = Vec::new();
    for (offset, &coef) in kernel.offsets.iter().zip(&kernel.coefficients) {
        if coef >= cutoff || *offset == (0, 0) {
            selected.push(*offset);
        }
    }
    selected
}


/// Per-factor member lists, flattened. Factor `k` covers pixels
/// `members[offsets[k]..offsets[k+1]]`; the first member is always the
/// factor's own pixel.
#[derive(Debug, Clone)]
pub struct NeighborStructure {
    pub width: usize,
    pub height: usize,
    offsets: Vec<u32>,
    members: Vec<u32>,
}

impl NeighborStructure {
    pub fn from_member_lists(width: usize, height: usize, lists: Vec<Vec<u32>>) -> Self {
        assert_eq!(lists.len(), width * height);
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut members = Vec::new();
        offsets.push(0u32);
        for (pixel, list) in lists.iter().enumerate() {
            debug_assert!(list.first() == Some(&(pixel as u32)));
            members.extend_from_slice(list);
            offsets.push(members.len() as u32);
        }
        NeighborStructure {
            width,
            height,
            offsets,
            members,
        }
    }

    #[inline]
    pub fn factor_count(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn members(&self, factor: usize) -> &[u32] {
        &self.members[self.offsets[factor] as usize..self.offsets[factor + 1] as usize]
    }

    /// Global slot indices of `factor`'s members: slot `slot_range(f).start + s`
    /// addresses the edge between factor `f` and its `s`-th member.
    #[inline]
    pub fn slot_range(&self, factor: usize) -> std::ops::Range<usize> {
        self.offsets[factor] as usize..self.offsets[factor + 1] as usize
    }

    /// Total number of (factor, member) edges.
    #[inline]
    pub fn total_slots(&self) -> usize {
        self.members.len()
    }

    /// Member pixel of a global slot.
    #[inline]
    pub fn slot_member(&self, slot: usize) -> u32 {
        self.members[slot]
    }

    /// Text dump "factor_id: member member ..." for debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for f in 0..self.factor_count() {
            out.push_str(&f.to_string());
            out.push(':');
            for m in self.members(f) {
                out.push(' ');
                out.push_str(&m.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Build one dependency factor per pixel: the pixel itself plus the
/// kernel-selected neighbors. Factors are independent, so membership may be
/// non-symmetric between pixels.
pub fn build_dependency_structure(
    img: &GrayImage,
    cfg: &NeighborhoodConfig,
) -> NeighborStructure {
    let width = img.width;
    let lists: Vec<Vec<u32>> = (0..img.width * img.height)
        .into_par_iter()
        .map(|pixel| {
            let (x, y) = (pixel % width, pixel / width);
            let kernel = match cfg.mode {
                NeighborMode::Bilateral => {
                    bilateral_kernel(img, (x, y), cfg.bilateral_size, cfg.sigma_spatial, cfg.sigma_range)
                }
                NeighborMode::Guided => {
                    guided_kernel(img, (x, y), cfg.guided_radius, cfg.guided_epsilon)
                }
            };
            let own = (y * width + x) as u32;
            let mut list = vec![own];
            for (dx, dy) in select_neighbors(&kernel, cfg.alpha) {
                if (dx, dy) == (0, 0) {
                    continue;
                }
                let nx = (x as i32 + dx) as u32;
                let ny = (y as i32 + dy) as u32;
                list.push(ny * width as u32 + nx);
            }
            list
        })
        .collect();
    NeighborStructure::from_member_lists(img.width, img.height, lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(w: usize, h: usize) -> GrayImage {
        // Vertical step edge: left half 0.0, right half 1.0.
        let data = (0..w * h)
            .map(|i| if i % w < w / 2 { 0.0 } else { 1.0 })
            .collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn bilateral_center_coefficient_is_max_one() {
        let img = step_image(9, 9);
        let k = bilateral_kernel(&img, (4, 4), 7, 3.0, 0.1);
        let ci = k.center_index();
        assert_eq!(k.coefficients[ci], 1.0);
        assert!(k
            .coefficients
            .iter()
            .all(|&c| c <= k.coefficients[ci] + 1e-15));
    }

    #[test]
    fn bilateral_on_constant_is_pure_spatial_gaussian() {
        let img = GrayImage::constant(9, 9, 0.4);
        let k = bilateral_kernel(&img, (4, 4), 7, 3.0, 0.1);
        for ((dx, dy), c) in k.offsets.iter().zip(&k.coefficients) {
            let want = (-((dx * dx + dy * dy) as f64) / 18.0).exp();
            assert!((c - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bilateral_cross_edge_attenuation() {
        // Step height 1 with sigma_r = 0.1: the range factor is exp(-50).
        let img = step_image(10, 7);
        let k = bilateral_kernel(&img, (4, 3), 7, 3.0, 0.1);
        let range_bound = (-50.0f64).exp();
        for ((dx, dy), c) in k.offsets.iter().zip(&k.coefficients) {
            let x = (4 + dx) as usize;
            if x >= 5 {
                let spatial = (-((dx * dx + dy * dy) as f64) / 18.0).exp();
                assert!(*c <= spatial * range_bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn bilateral_invariant_to_intensity_offset() {
        // The range term depends only on intensity differences, so adding a
        // constant to the image must not change any coefficient.
        let data = (0..81)
            .map(|i| if i % 9 < 4 { 0.1 } else { 0.5 })
            .collect::<Vec<_>>();
        let img = GrayImage::new(9, 9, data.clone()).unwrap();
        let img2 = GrayImage::new(9, 9, data.iter().map(|v| v + 0.3).collect()).unwrap();
        let a = bilateral_kernel(&img, (3, 4), 5, 2.0, 0.3);
        let b = bilateral_kernel(&img2, (3, 4), 5, 2.0, 0.3);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_constant_patch_is_uniform() {
        let img = GrayImage::constant(8, 8, 0.7);
        let k = guided_kernel(&img, (4, 4), 2, 0.01);
        let n = k.coefficients.len() as f64;
        for c in &k.coefficients {
            assert!((c - 1.0 / n).abs() < 1e-15);
        }
    }

    #[test]
    fn guided_matches_literal_formula() {
        // Deterministic pseudo-random 5x5 patch; evaluate the formula
        // term by term with independent loops.
        let mut v = 0.123f64;
        let data: Vec<f64> = (0..25)
            .map(|_| {
                v = (v * 37.7 + 0.417).fract();
                v
            })
            .collect();
        let img = GrayImage::new(5, 5, data.clone()).unwrap();
        let eps = 0.02;
        let k = guided_kernel(&img, (2, 2), 2, eps);

        let mean = data.iter().sum::<f64>() / 25.0;
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 25.0;
        for ((dx, dy), got) in k.offsets.iter().zip(&k.coefficients) {
            let m = ((dy + 2) * 5 + (dx + 2)) as usize;
            let mut want = 0.0;
            for other in &data {
                want += 1.0 + (data[m] - mean) * (other - mean) / (var + eps);
            }
            want /= 25.0 * 25.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_coefficients_sum_is_content_independent() {
        let mut v = 0.77f64;
        for _ in 0..5 {
            let data: Vec<f64> = (0..49)
                .map(|_| {
                    v = (v * 29.3 + 0.71).fract();
                    v
                })
                .collect();
            let img = GrayImage::new(7, 7, data).unwrap();
            let k = guided_kernel(&img, (3, 3), 3, 0.005);
            let total: f64 = k.coefficients.iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "sum {total}");
        }
    }

    #[test]
    fn select_low_alpha_keeps_everything() {
        let img = GrayImage::constant(7, 7, 0.5);
        let k = bilateral_kernel(&img, (3, 3), 7, 3.0, 0.1);
        let sel = select_neighbors(&k, 1e-9);
        assert_eq!(sel.len(), k.offsets.len());
    }

    #[test]
    fn select_all_equal_keeps_everything() {
        let img = GrayImage::constant(7, 7, 0.5);
        let k = guided_kernel(&img, (3, 3), 3, 0.01);
        let sel = select_neighbors(&k, 97.0);
        assert_eq!(sel.len(), k.offsets.len());
    }

    #[test]
    fn select_constant_bilateral_alpha97_keeps_nearest() {
        // Interior 7x7 patch on a constant image: coefficients are the pure
        // spatial Gaussian; the 97th linear-interpolated percentile over 49
        // values falls on the 4-way tie at distance 1, so the center plus
        // its four unit neighbors survive.
        let img = GrayImage::constant(11, 11, 0.3);
        let k = bilateral_kernel(&img, (5, 5), 7, 3.0, 0.1);
        let mut sel = select_neighbors(&k, 97.0);
        sel.sort();
        assert_eq!(sel, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn higher_alpha_selects_subset() {
        let img = step_image(9, 9);
        for center in [(2usize, 3usize), (4, 4), (7, 1)] {
            let k = bilateral_kernel(&img, center, 7, 3.0, 0.1);
            let loose: std::collections::BTreeSet<_> =
                select_neighbors(&k, 50.0).into_iter().collect();
            let tight: std::collections::BTreeSet<_> =
                select_neighbors(&k, 97.0).into_iter().collect();
            assert!(tight.is_subset(&loose));
        }
    }

    #[test]
    fn structure_translation_invariant_on_constant() {
        let img = GrayImage::constant(12, 12, 0.6);
        let cfg = NeighborhoodConfig::default();
        let s = build_dependency_structure(&img, &cfg);
        // Compare interior factors by relative offsets.
        let rel = |factor: usize| -> Vec<(i32, i32)> {
            let fx = (factor % 12) as i32;
            let fy = (factor / 12) as i32;
            s.members(factor)
                .iter()
                .map(|m| ((*m % 12) as i32 - fx, (*m / 12) as i32 - fy))
                .collect()
        };
        let want = rel(5 * 12 + 5);
        for y in 4..8 {
            for x in 4..8 {
                assert_eq!(rel(y * 12 + x), want);
            }
        }
    }

    #[test]
    fn structure_does_not_cross_strong_edge() {
        let img = step_image(12, 8);
        let cfg = NeighborhoodConfig::default();
        let s = build_dependency_structure(&img, &cfg);
        for y in 0..8 {
            for x in 0..12usize {
                for m in s.members(y * 12 + x) {
                    let mx = (*m as usize) % 12;
                    assert_eq!(
                        mx < 6,
                        x < 6,
                        "factor at ({x},{y}) crossed the edge to column {mx}"
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_single_pixel() {
        let img = GrayImage::constant(1, 1, 0.0);
        let s = build_dependency_structure(&img, &NeighborhoodConfig::default());
        assert_eq!(s.factor_count(), 1);
        assert_eq!(s.members(0), &[0]);
    }

    #[test]
    fn own_pixel_is_first_member() {
        let img = step_image(6, 5);
        let s = build_dependency_structure(&img, &NeighborhoodConfig::default());
        for f in 0..s.factor_count() {
            assert_eq!(s.members(f)[0] as usize, f);
        }
    }
}
