//! Deterministic synthetic stereo scenes with known ground truth.
//!
//! Used by tests and benchmarks, and handy for demos: multi-octave value
//! noise gives texture everywhere, and a z-buffered forward warp produces a
//! right view with realistic occlusion structure from any left-reference
//! disparity field.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{DisparityMap, GrayImage};

/// Multi-octave value noise in `[0.05, 0.95]`; the finest octave has
/// single-pixel cells.
pub fn value_noise(width: usize, height: usize, octaves: usize, seed: u64) -> GrayImage {
    value_noise_cells(width, height, octaves, 1, seed)
}

/// Value noise whose finest lattice cell is `min_cell` pixels; larger
/// cells give smoother, more photograph-like surfaces.
pub fn value_noise_cells(
    width: usize,
    height: usize,
    octaves: usize,
    min_cell: usize,
    seed: u64,
) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; width * height];
    let mut amplitude = 1.0;
    let mut total_amp = 0.0;
    for octave in 0..octaves.max(1) {
        let cell = (min_cell.max(1) << (octaves - 1 - octave)).min(1 << 12);
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        for y in 0..height {
            let gy = y / cell;
            let fy = (y % cell) as f64 / cell as f64;
            for x in 0..width {
                let gx = x / cell;
                let fx = (x % cell) as f64 / cell as f64;
                let v00 = grid[gy * gw + gx];
                let v10 = grid[gy * gw + gx + 1];
                let v01 = grid[(gy + 1) * gw + gx];
                let v11 = grid[(gy + 1) * gw + gx + 1];
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                acc[y * width + x] += amplitude * v;
            }
        }
        total_amp += amplitude;
        amplitude *= 0.55;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &acc {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-12);
    let _ = total_amp;
    let data = acc
        .into_iter()
        .map(|v| 0.05 + 0.9 * (v - lo) / span)
        .collect();
    GrayImage {
        width,
        height,
        data,
    }
}

/// A stereo pair whose disparity is a constant integer `shift` everywhere.
/// Both views are fully textured crops of one wider noise field, so there
/// is no occlusion and every pixel has a true correspondence.
pub fn constant_shift_pair(
    width: usize,
    height: usize,
    shift: usize,
    seed: u64,
) -> (GrayImage, GrayImage, DisparityMap) {
    let tex = value_noise(width + shift, height, 5, seed);
    let crop = |x0: usize| -> GrayImage {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(tex.get(x + x0, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    };
    // left(x) must equal right(x - d): the right view samples the texture
    // `shift` columns further right.
    let left = crop(0);
    let right = crop(shift);
    let gt = DisparityMap::filled(width, height, shift as f32);
    (left, right, gt)
}

/// Synthesize the right view of `left` for a per-pixel integer disparity
/// field by forward warping with a z-buffer (larger disparity = nearer =
/// wins). Disoccluded right-image pixels are filled from an independent
/// noise field, mimicking content visible only to the right camera.
pub fn warp_right(left: &GrayImage, disp: &[i32], seed: u64) -> GrayImage {
    let (w, h) = (left.width, left.height);
    assert_eq!(disp.len(), w * h);
    let holes = value_noise(w, h, 5, seed ^ 0x5EED_F11E);
    let mut right = holes.data.clone();
    let mut zbuf = vec![i32::MIN; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = disp[y * w + x];
            let u = x as i64 - d as i64;
            if u < 0 || u >= w as i64 {
                continue;
            }
            let ui = y * w + u as usize;
            if d > zbuf[ui] {
                zbuf[ui] = d;
                right[ui] = left.get(x, y);
            }
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: right,
    }
}

/// Two-level piecewise-constant scene: background disparity `d_bg` with a
/// centered foreground rectangle at `d_fg`.
pub fn two_level_pair(
    width: usize,
    height: usize,
    d_bg: i32,
    d_fg: i32,
    seed: u64,
) -> (GrayImage, GrayImage, DisparityMap) {
    let left = value_noise(width, height, 5, seed);
    let (rx0, rx1) = (width / 4, 3 * width / 4);
    let (ry0, ry1) = (height / 4, 3 * height / 4);
    let disp: Vec<i32> = (0..width * height)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            if x >= rx0 && x < rx1 && y >= ry0 && y < ry1 {
                d_fg
            } else {
                d_bg
            }
        })
        .collect();
    let right = warp_right(&left, &disp, seed);
    let gt = DisparityMap {
        width,
        height,
        data: disp.iter().map(|d| *d as f32).collect(),
    };
    (left, right, gt)
}

/// Apply a smooth multiplicative illumination ramp; `gain_left`/`gain_right`
/// are the field values at the image's left and right edges.
pub fn apply_illumination(img: &GrayImage, gain_left: f64, gain_right: f64) -> GrayImage {
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = (i % img.width) as f64 / (img.width.max(2) - 1) as f64;
            (v * (gain_left + (gain_right - gain_left) * x)).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Quantize intensities to the 8-bit grid, as file-backed captures are.
pub fn quantize_8bit(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|v| (v * 255.0).round() / 255.0)
            .collect(),
    }
}

/// Add uniform noise in `[-amplitude, amplitude]`, clamped to `[0, 1]`.
pub fn add_noise(img: &GrayImage, amplitude: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data
        .iter()
        .map(|v| (v + amplitude * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0))
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// A cluttered benchmark-style scene: a textured background ramp,
/// several foreground rectangles carrying distinct oriented textures, and
/// large featureless mid-gray blobs where single-window matching has
/// nothing to grab.
///
/// The mix mirrors what makes real benchmark pairs hard: textured
/// structure anchors confident evidence, the flat blobs yield uninformed
/// (uniform) priors that only neighborhood consensus can resolve, and the
/// depth discontinuities produce genuine occlusion for the post-processing
/// stages. Views are clean renders; see [`apply_illumination`],
/// [`add_noise`], and [`quantize_8bit`] for harder photometric variants.
///
/// Returns `(left, right, ground truth)`; disparities span roughly
/// `[ndisp/4, ndisp*5/8]` so the `[0, ndisp)` search range has slack.
pub fn cluttered_scene(
    width: usize,
    height: usize,
    ndisp: usize,
    seed: u64,
) -> (GrayImage, GrayImage, DisparityMap) {
    let d_lo = (ndisp as i32 / 4).max(1);
    let d_hi = (ndisp as i32 * 5 / 8).max(d_lo + 4);

    // Background: a gentle integer ramp, near at the bottom.
    let mut disp: Vec<i32> = (0..width * height)
        .map(|i| {
            let y = i / width;
            let t = y as f64 / (height.max(2) - 1) as f64;
            d_lo + (t * (d_hi - d_lo) as f64 * 0.7).round() as i32
        })
        .collect();
    let bg = value_noise_cells(width, height, 5, 2, seed);
    let mut tex = bg.data.clone();

    // Foreground rectangles, each with its own stripe orientation and
    // wavelength so texture segmentation can tell them apart.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0BEC75);
    for r in 0..4u64 {
        let rw = width / 6 + rng.gen_range(0..width / 5);
        let rh = height / 6 + rng.gen_range(0..height / 5);
        let x0 = rng.gen_range(0..width.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..height.saturating_sub(rh).max(1));
        let d = d_lo + 3 + ((d_hi - d_lo - 3) * (r as i32 + 1) / 4);
        let obj = value_noise_cells(width, height, 4, 3, seed ^ (0xABC0 + r));
        let angle = (r as f64) * 45.0_f64.to_radians() + 0.3;
        let (sin_a, cos_a) = angle.sin_cos();
        let wavelength = 5.0 + 2.0 * r as f64;
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                let i = y * width + x;
                if d >= disp[i] {
                    disp[i] = d;
                    let phase = (x as f64 * cos_a + y as f64 * sin_a)
                        * std::f64::consts::TAU
                        / wavelength;
                    let stripe = 0.5 + 0.5 * phase.sin();
                    tex[i] =
                        (0.45 * stripe + 0.35 * obj.data[i] + 0.2 * bg.data[i]).clamp(0.02, 0.98);
                }
            }
        }
    }

    // Featureless blobs wiped to a constant tone, over objects and
    // background alike.
    let flat_mask = value_noise_cells(width, height, 2, 64, seed ^ 0x3A5C);
    for i in 0..width * height {
        if flat_mask.data[i] < 0.55 {
            tex[i] = 0.5;
        }
    }

    let base = GrayImage {
        width,
        height,
        data: tex,
    };
    let right = warp_right(&base, &disp, seed);
    let gt = DisparityMap {
        width,
        height,
        data: disp.iter().map(|d| *d as f32).collect(),
    };
    (base, right, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_in_range() {
        let a = value_noise(32, 20, 5, 7);
        let b = value_noise(32, 20, 5, 7);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.04..=0.96).contains(v)));
        assert_ne!(a, value_noise(32, 20, 5, 8));
    }

    #[test]
    fn constant_shift_pair_correspondence() {
        let (left, right, gt) = constant_shift_pair(40, 12, 5, 3);
        for y in 0..12 {
            for x in 5..40 {
                assert_eq!(left.get(x, y), right.get(x - 5, y));
            }
        }
        assert!(gt.data.iter().all(|d| *d == 5.0));
    }

    #[test]
    fn warp_preserves_visible_surface() {
        let left = value_noise(30, 10, 4, 1);
        let disp = vec![3i32; 300];
        let right = warp_right(&left, &disp, 99);
        for y in 0..10 {
            for x in 3..30 {
                assert_eq!(right.get(x - 3, y), left.get(x, y));
            }
        }
    }

    #[test]
    fn nearer_surface_wins_warp() {
        // Columns 10.. are at disparity 6, the rest at 2: where both project
        // to the same right pixel, the d=6 content must win.
        let left = value_noise(24, 4, 4, 2);
        let disp: Vec<i32> = (0..24 * 4)
            .map(|i| if i % 24 >= 10 { 6 } else { 2 })
            .collect();
        let right = warp_right(&left, &disp, 5);
        // Left pixel x=10 (d=6) and x=6 (d=2) both land on right x=4.
        assert_eq!(right.get(4, 0), left.get(10, 0));
    }

    #[test]
    fn cluttered_scene_shapes() {
        let (l, r, gt) = cluttered_scene(64, 48, 24, 11);
        assert_eq!((l.width, l.height), (64, 48));
        assert_eq!((r.width, r.height), (64, 48));
        let dmax = gt.data.iter().cloned().fold(0.0f32, f32::max);
        let dmin = gt.data.iter().cloned().fold(f32::MAX, f32::min);
        assert!(dmin >= 1.0 && dmax <= 23.0, "range [{dmin}, {dmax}]");
    }
}
