//! Disparity-map evaluation: average absolute error, PSNR, thresholded
//! bad-pixel rate, signed error maps, and difficulty-weighted aggregation.
//!
//! Evaluation always runs over the pixels where ground truth is valid;
//! occluded regions are *not* excluded. Estimates are required to be fully
//! valid there (post-processing fills every hole), so an invalid estimate
//! under a valid ground-truth pixel is an error, not a silent skip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DisparityMap, INVALID_DISPARITY};

/// Metric triplet for one estimated map against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute disparity error in pixels.
    pub avg_err: f64,
    /// Peak signal-to-noise ratio in dB; `f64::INFINITY` for a zero-error map.
    pub psnr: f64,
    /// Percentage of evaluated pixels with |error| > `bad_threshold`.
    pub bad: f64,
    pub bad_threshold: f64,
    /// Number of ground-truth-valid pixels that were evaluated.
    pub evaluated: usize,
}

fn check_pair(est: &DisparityMap, gt: &DisparityMap) -> Result<()> {
    if est.width != gt.width || est.height != gt.height {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: estimate {}x{} vs ground truth {}x{}",
            est.width, est.height, gt.width, gt.height
        )));
    }
    for i in 0..gt.data.len() {
        if gt.data[i].is_finite() && !est.data[i].is_finite() {
            return Err(Error::InvalidInput(
                "estimate contains invalid pixels inside the evaluation mask".into(),
            ));
        }
    }
    Ok(())
}

/// Mean absolute error over ground-truth-valid pixels.
pub fn avg_err(est: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    check_pair(est, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, g) in est.data.iter().zip(&gt.data) {
        if g.is_finite() {
            sum += (*e as f64 - *g as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no valid ground-truth pixels".into()));
    }
    Ok(sum / count as f64)
}

/// PSNR in dB with the conventional 255 peak:
/// `10 log10(255^2 * n / sum((est - gt)^2))`.
pub fn psnr(est: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    check_pair(est, gt)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (e, g) in est.data.iter().zip(&gt.data) {
        if g.is_finite() {
            let d = *e as f64 - *g as f64;
            sq += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no valid ground-truth pixels".into()));
    }
    if sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 * count as f64 / sq).log10())
}

/// Percentage of evaluated pixels whose absolute error strictly exceeds
/// `threshold` pixels. `threshold = 2` is the Bad2.0 convention;
/// `threshold = 0` counts every non-exact pixel.
pub fn bad_percent(est: &DisparityMap, gt: &DisparityMap, threshold: f64) -> Result<f64> {
    check_pair(est, gt)?;
    let mut bad = 0usize;
    let mut count = 0usize;
    for (e, g) in est.data.iter().zip(&gt.data) {
        if g.is_finite() {
            if (*e as f64 - *g as f64).abs() > threshold {
                bad += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no valid ground-truth pixels".into()));
    }
    Ok(100.0 * bad as f64 / count as f64)
}

/// Signed per-pixel error `est - gt`; the sentinel where gt is invalid.
pub fn error_map(est: &DisparityMap, gt: &DisparityMap) -> Result<DisparityMap> {
    if est.width != gt.width || est.height != gt.height {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let data = est
        .data
        .iter()
        .zip(&gt.data)
        .map(|(e, g)| {
            if g.is_finite() && e.is_finite() {
                e - g
            } else {
                INVALID_DISPARITY
            }
        })
        .collect();
    DisparityMap::new(est.width, est.height, data)
}

pub fn evaluate(est: &DisparityMap, gt: &DisparityMap, bad_threshold: f64) -> Result<MetricsReport> {
    let evaluated = gt.data.iter().filter(|v| v.is_finite()).count();
    Ok(MetricsReport {
        avg_err: avg_err(est, gt)?,
        psnr: psnr(est, gt)?,
        bad: bad_percent(est, gt, bad_threshold)?,
        bad_threshold,
        evaluated,
    })
}

/// Weighted mean of `(weight, value)` entries.
pub fn weighted_average(entries: &[(f64, f64)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::InvalidInput(
            "weighted average of an empty list".into(),
        ));
    }
    if entries.iter().any(|(w, _)| !(*w > 0.0)) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    let total: f64 = entries.iter().map(|(w, _)| w).sum();
    Ok(entries.iter().map(|(w, v)| w * v).sum::<f64>() / total)
}

/// Per-scene reports plus their difficulty-weighted aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedSummary {
    pub entries: Vec<SummaryEntry>,
    pub weighted_avg_err: f64,
    pub weighted_psnr: f64,
    pub weighted_bad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub name: String,
    pub weight: f64,
    pub report: MetricsReport,
}

impl WeightedSummary {
    pub fn from_entries(entries: Vec<SummaryEntry>) -> Result<Self> {
        let pick =
            |f: fn(&MetricsReport) -> f64| -> Vec<(f64, f64)> {
                entries.iter().map(|e| (e.weight, f(&e.report))).collect()
            };
        let weighted_avg_err = weighted_average(&pick(|r| r.avg_err))?;
        let weighted_psnr = weighted_average(&pick(|r| r.psnr))?;
        let weighted_bad = weighted_average(&pick(|r| r.bad))?;
        Ok(WeightedSummary {
            entries,
            weighted_avg_err,
            weighted_psnr,
            weighted_bad,
        })
    }

    /// CSV rows: one per scene plus a trailing weighted-average row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,weight,avg_err,psnr,bad,bad_threshold,evaluated\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{}\n",
                e.name,
                e.weight,
                e.report.avg_err,
                e.report.psnr,
                e.report.bad,
                e.report.bad_threshold,
                e.report.evaluated
            ));
        }
        out.push_str(&format!(
            "weighted_average,,{:.6},{:.6},{:.6},,\n",
            self.weighted_avg_err, self.weighted_psnr, self.weighted_bad
        ));
        out
    }
}
