//! Colormapped disparity rendering for visual inspection.

use crate::image::{DisparityMap, RgbRaster};

/// Jet-style lookup: t in [0, 1] maps dark blue through green to dark red.
/// Distinct from black at every t so invalid pixels stay identifiable.
fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Render a disparity map into an RGB raster.
///
/// Valid disparities map linearly from `range` into the colormap; invalid
/// pixels render black. Values outside `range` are clamped.
pub fn render_colormap(map: &DisparityMap, range: (f32, f32)) -> RgbRaster {
    let (lo, hi) = range;
    let span = (hi - lo) as f64;
    let mut out = RgbRaster::black(map.width, map.height);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.get(x, y);
            if !v.is_finite() {
                continue; // stays black
            }
            let t = if span > 0.0 {
                ((v - lo) as f64 / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.set(x, y, jet(t));
        }
    }
    out
}

/// Render a signed error map symmetrically: zero error is mid-scale,
/// +/- `max_abs` are the colormap extremes. Invalid pixels are black.
pub fn render_error_map(map: &DisparityMap, max_abs: f32) -> RgbRaster {
    let m = max_abs.max(f32::MIN_POSITIVE);
    render_colormap(map, (-m, m))
}
