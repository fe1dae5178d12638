//! Occlusion handling: left-right consistency masking, scanline fill, and
//! guide-weighted median smoothing.

use rayon::prelude::*;

use crate::image::{DisparityMap, GrayImage};
use crate::neighborhood::bilateral_kernel;

/// Per-pixel occlusion flags; `true` marks an inconsistent/occluded pixel.
#[derive(Debug, Clone)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl OcclusionMask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn occluded_count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Mark pixels whose left-reference disparity disagrees with the
/// right-reference map. Pixel `(x, y)` is occluded when its correspondence
/// `x - round(dL)` leaves the frame or the two estimates differ by more
/// than `tol` pixels.
pub fn lrc_mask(disp_left: &DisparityMap, disp_right: &DisparityMap, tol: f32) -> OcclusionMask {
    assert_eq!(
        (disp_left.width, disp_left.height),
        (disp_right.width, disp_right.height),
        "left/right disparity maps must share dimensions"
    );
    let (w, h) = (disp_left.width, disp_left.height);
    let mut data = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let dl = disp_left.get(x, y);
            let occluded = if !dl.is_finite() {
                true
            } else {
                let xr = x as i64 - dl.round() as i64;
                if xr < 0 || xr >= w as i64 {
                    true
                } else {
                    let dr = disp_right.get(xr as usize, y);
                    !dr.is_finite() || (dl - dr).abs() > tol
                }
            };
            data[y * w + x] = occluded;
        }
    }
    OcclusionMask {
        width: w,
        height: h,
        data,
    }
}

/// Replace each occluded pixel with the disparity of the nearest
/// non-occluded pixel in its row; ties between the left and right neighbor
/// take the smaller disparity (background preference). Rows with no valid
/// pixel fall back to the nearest non-occluded pixel in the same column.
pub fn fill_occlusions(disp: &DisparityMap, mask: &OcclusionMask) -> DisparityMap {
    assert_eq!((disp.width, disp.height), (mask.width, mask.height));
    let (w, h) = (disp.width, disp.height);
    let mut out = disp.clone();

    // Rows that contain at least one valid pixel fill in-row.
    let mut row_has_valid = vec![false; h];
    for y in 0..h {
        row_has_valid[y] = (0..w).any(|x| !mask.get(x, y));
    }

    for y in 0..h {
        if !row_has_valid[y] {
            continue;
        }
        // Distance and value of the nearest valid pixel to the left/right.
        let mut left_val = vec![None::<(usize, f32)>; w];
        let mut last: Option<(usize, f32)> = None;
        for x in 0..w {
            if !mask.get(x, y) {
                last = Some((x, disp.get(x, y)));
            }
            left_val[x] = last;
        }
        let mut right_val = vec![None::<(usize, f32)>; w];
        let mut next: Option<(usize, f32)> = None;
        for x in (0..w).rev() {
            if !mask.get(x, y) {
                next = Some((x, disp.get(x, y)));
            }
            right_val[x] = next;
        }
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let filled = match (left_val[x], right_val[x]) {
                (Some((lx, lv)), Some((rx, rv))) => {
                    let dl = x - lx;
                    let dr = rx - x;
                    if dl < dr {
                        lv
                    } else if dr < dl {
                        rv
                    } else {
                        lv.min(rv)
                    }
                }
                (Some((_, lv)), None) => lv,
                (None, Some((_, rv))) => rv,
                (None, None) => unreachable!("row checked to contain a valid pixel"),
            };
            out.set(x, y, filled);
        }
    }

    // Fully occluded rows: nearest valid pixel up/down the column, after
    // the in-row pass so donors are the original non-occluded values.
    for y in 0..h {
        if row_has_valid[y] {
            continue;
        }
        for x in 0..w {
            let mut best: Option<(usize, f32)> = None;
            for yy in 0..h {
                if !mask.get(x, yy) {
                    let dist = y.abs_diff(yy);
                    best = match best {
                        None => Some((dist, disp.get(x, yy))),
                        Some((bd, bv)) => {
                            if dist < bd || (dist == bd && disp.get(x, yy) < bv) {
                                Some((dist, disp.get(x, yy)))
                            } else {
                                Some((bd, bv))
                            }
                        }
                    };
                }
            }
            if let Some((_, v)) = best {
                out.set(x, y, v);
            }
            // A map with no valid pixel anywhere stays unchanged.
        }
    }
    out
}

/// Smooth a disparity map with a weighted median whose weights are
/// bilateral coefficients of the guide image. The median is the smallest
/// window value whose cumulative weight reaches half the total, so the
/// output only contains disparities already present in the input.
pub fn weighted_median(
    disp: &DisparityMap,
    guide: &GrayImage,
    window: usize,
    sigma_s: f64,
    sigma_r: f64,
) -> DisparityMap {
    assert!(window % 2 == 1, "median window must be odd");
    assert_eq!((disp.width, disp.height), (guide.width, guide.height));
    let (w, h) = (disp.width, disp.height);
    let data: Vec<f32> = (0..w * h)
        .into_par_iter()
        .map(|pixel| {
            let (x, y) = (pixel % w, pixel / w);
            let kernel = bilateral_kernel(guide, (x, y), window, sigma_s, sigma_r);
            let mut entries: Vec<(f32, f64)> = Vec::with_capacity(kernel.offsets.len());
            let mut total = 0.0;
            for ((dx, dy), &coef) in kernel.offsets.iter().zip(&kernel.coefficients) {
                let vx = (x as i32 + dx) as usize;
                let vy = (y as i32 + dy) as usize;
                let v = disp.get(vx, vy);
                if v.is_finite() {
                    entries.push((v, coef));
                    total += coef;
                }
            }
            if entries.is_empty() {
                return disp.get(x, y);
            }
            entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut cum = 0.0;
            for (v, wgt) in &entries {
                cum += wgt;
                if cum >= total / 2.0 {
                    return *v;
                }
            }
            entries.last().unwrap().0
        })
        .collect();
    DisparityMap {
        width: w,
        height: h,
        data,
    }
}
