//! End-to-end pipeline orchestration: configuration, single-pair runs,
//! dataset sweeps, and report emission.
//!
//! Stage order: illumination correction, texture segmentation, sparse cost
//! volume and priors, kernel neighborhoods, loopy BP, MAP extraction, then
//! left-right consistency, scanline fill, and weighted median. The
//! right-reference map for the consistency check comes from rerunning the
//! full pipeline on a mirrored, swapped pair and mirroring the result back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::colormap::{render_colormap, render_error_map};
use crate::cost::{
    build_cost_volume, detect_candidates, match_candidates, zonal_ranges, PriorField,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, map_disparity, run_lbp, trace_to_csv, ConvergenceNorm, IterationTrace, LbpConfig};
use crate::image::{DisparityMap, GrayImage};
use crate::io;
use crate::metrics::{self, MetricsReport, SummaryEntry, WeightedSummary};
use crate::neighborhood::{build_dependency_structure, NeighborMode, NeighborhoodConfig};
use crate::postprocess::{fill_occlusions, lrc_mask, weighted_median};
use crate::preprocess::{homomorphic_correct, HomomorphicConfig};
use crate::segmentation::{segment_texture, GaborBankConfig, SegmentationConfig};

/// Every stage parameter, with defaults matching the reference settings:
/// 21x21 homomorphic window; six Gabor orientations with an octave ladder
/// from 2.83; k-means with K=15, 5 replicates, 500 iterations; 3x3 NCC
/// templates; 7x7 bilateral kernels with sigma_s 3, sigma_r 0.1 and a 97th
/// percentile cut-off; 60 LBP iterations; 1-px LRC tolerance; 7x7 median;
/// Bad2.0 reporting threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub homomorphic_kernel: usize,
    pub homomorphic_epsilon: f64,
    pub gabor_orientations: Vec<f64>,
    pub gabor_wavelength_start: f64,
    pub gabor_bandwidth: f64,
    pub segmentation_clusters: usize,
    pub kmeans_replicates: usize,
    pub kmeans_max_iter: usize,
    pub coord_weight: f64,
    pub feature_quality: f64,
    pub feature_min_distance: f64,
    pub match_window: usize,
    pub match_min_score: f64,
    pub match_margin: f64,
    pub ncc_template: usize,
    pub neighbor_mode: NeighborMode,
    pub bilateral_size: usize,
    pub bilateral_sigma_spatial: f64,
    pub bilateral_sigma_range: f64,
    pub guided_radius: usize,
    pub guided_epsilon: f64,
    pub alpha_percentile: f64,
    pub lbp_tau: f64,
    pub lbp_convergence: ConvergenceNorm,
    pub lbp_max_iter: usize,
    pub lbp_min_iter: usize,
    pub lbp_damping: f64,
    pub lbp_message_floor: f64,
    pub lrc_tolerance: f64,
    pub median_window: usize,
    pub bad_threshold: f64,
    pub seed: u64,
    pub quarter: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            homomorphic_kernel: 21,
            homomorphic_epsilon: 1e-6,
            gabor_orientations: vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0],
            gabor_wavelength_start: 2.0 * std::f64::consts::SQRT_2,
            gabor_bandwidth: 1.0,
            segmentation_clusters: 15,
            kmeans_replicates: 5,
            kmeans_max_iter: 500,
            coord_weight: 1.0,
            feature_quality: 0.01,
            feature_min_distance: 5.0,
            match_window: 11,
            match_min_score: 0.8,
            match_margin: 0.05,
            ncc_template: 3,
            neighbor_mode: NeighborMode::Bilateral,
            bilateral_size: 7,
            bilateral_sigma_spatial: 3.0,
            bilateral_sigma_range: 0.1,
            guided_radius: 3,
            guided_epsilon: 0.01,
            alpha_percentile: 97.0,
            // tau compares the per-pixel RMS map change: an absolute-L2
            // threshold of 0.5 would demand a bit-exact decoded fixpoint,
            // which loopy schedules settle into only modulo small limit
            // cycles. RMS 0.5 is the scale-free "map stopped moving" bar.
            lbp_tau: 0.5,
            lbp_convergence: ConvergenceNorm::Rms,
            lbp_max_iter: 60,
            lbp_min_iter: 1,
            // Synchronous flooding oscillates without a little inertia.
            lbp_damping: 0.25,
            lbp_message_floor: 1e-12,
            // MAP disparities are integral, so a 1-px tolerance cannot see
            // the off-by-one failures that cluster at frame borders; 0.5
            // accepts only exact agreement for integer maps.
            lrc_tolerance: 0.5,
            median_window: 7,
            bad_threshold: 2.0,
            seed: 7,
            quarter: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let hm = HomomorphicConfig {
            kernel_size: self.homomorphic_kernel,
            epsilon_log: self.homomorphic_epsilon,
        };
        hm.validate().map_err(Error::InvalidInput)?;
        if !(self.feature_quality > 0.0 && self.feature_quality <= 1.0) {
            return Err(Error::InvalidInput("feature_quality must be in (0, 1]".into()));
        }
        if self.match_window % 2 == 0 || self.ncc_template % 2 == 0 || self.median_window % 2 == 0
        {
            return Err(Error::InvalidInput(
                "match_window, ncc_template, and median_window must be odd".into(),
            ));
        }
        if self.bilateral_size % 2 == 0 {
            return Err(Error::InvalidInput("bilateral_size must be odd".into()));
        }
        if !(self.alpha_percentile > 0.0 && self.alpha_percentile < 100.0) {
            return Err(Error::InvalidInput(
                "alpha_percentile must lie in (0, 100)".into(),
            ));
        }
        if !(self.match_min_score >= 0.0 && self.match_margin >= 0.0) {
            return Err(Error::InvalidInput("match thresholds must be >= 0".into()));
        }
        self.lbp().validate()?;
        GaborBankConfig {
            orientations_deg: self.gabor_orientations.clone(),
            wavelength_start: self.gabor_wavelength_start,
            bandwidth: self.gabor_bandwidth,
        }
        .validate()?;
        Ok(())
    }

    pub fn lbp(&self) -> LbpConfig {
        LbpConfig {
            tau: self.lbp_tau,
            convergence: self.lbp_convergence,
            max_iter: self.lbp_max_iter,
            min_iter: self.lbp_min_iter,
            damping: self.lbp_damping,
            message_floor: self.lbp_message_floor,
        }
    }

    pub fn neighborhood(&self) -> NeighborhoodConfig {
        NeighborhoodConfig {
            mode: self.neighbor_mode,
            bilateral_size: self.bilateral_size,
            sigma_spatial: self.bilateral_sigma_spatial,
            sigma_range: self.bilateral_sigma_range,
            guided_radius: self.guided_radius,
            guided_epsilon: self.guided_epsilon,
            alpha: self.alpha_percentile,
        }
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            gabor: GaborBankConfig {
                orientations_deg: self.gabor_orientations.clone(),
                wavelength_start: self.gabor_wavelength_start,
                bandwidth: self.gabor_bandwidth,
            },
            clusters: self.segmentation_clusters,
            replicates: self.kmeans_replicates,
            max_iter: self.kmeans_max_iter,
            coord_weight: self.coord_weight,
        }
    }

    /// Serialize as `key = value` lines; parses back losslessly.
    pub fn to_config_string(&self) -> String {
        let orientations = self
            .gabor_orientations
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mode = match self.neighbor_mode {
            NeighborMode::Bilateral => "bilateral",
            NeighborMode::Guided => "guided",
        };
        let conv = match self.lbp_convergence {
            ConvergenceNorm::AbsoluteL2 => "absolute_l2",
            ConvergenceNorm::Rms => "rms",
        };
        let mut s = String::from("# fgstereo pipeline configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("homomorphic_kernel", self.homomorphic_kernel.to_string());
        kv("homomorphic_epsilon", self.homomorphic_epsilon.to_string());
        kv("gabor_orientations", orientations);
        kv(
            "gabor_wavelength_start",
            self.gabor_wavelength_start.to_string(),
        );
        kv("gabor_bandwidth", self.gabor_bandwidth.to_string());
        kv(
            "segmentation_clusters",
            self.segmentation_clusters.to_string(),
        );
        kv("kmeans_replicates", self.kmeans_replicates.to_string());
        kv("kmeans_max_iter", self.kmeans_max_iter.to_string());
        kv("coord_weight", self.coord_weight.to_string());
        kv("feature_quality", self.feature_quality.to_string());
        kv(
            "feature_min_distance",
            self.feature_min_distance.to_string(),
        );
        kv("match_window", self.match_window.to_string());
        kv("match_min_score", self.match_min_score.to_string());
        kv("match_margin", self.match_margin.to_string());
        kv("ncc_template", self.ncc_template.to_string());
        kv("neighbor_mode", mode.to_string());
        kv("bilateral_size", self.bilateral_size.to_string());
        kv(
            "bilateral_sigma_spatial",
            self.bilateral_sigma_spatial.to_string(),
        );
        kv(
            "bilateral_sigma_range",
            self.bilateral_sigma_range.to_string(),
        );
        kv("guided_radius", self.guided_radius.to_string());
        kv("guided_epsilon", self.guided_epsilon.to_string());
        kv("alpha_percentile", self.alpha_percentile.to_string());
        kv("lbp_tau", self.lbp_tau.to_string());
        kv("lbp_convergence", conv.to_string());
        kv("lbp_max_iter", self.lbp_max_iter.to_string());
        kv("lbp_min_iter", self.lbp_min_iter.to_string());
        kv("lbp_damping", self.lbp_damping.to_string());
        kv("lbp_message_floor", self.lbp_message_floor.to_string());
        kv("lrc_tolerance", self.lrc_tolerance.to_string());
        kv("median_window", self.median_window.to_string());
        kv("bad_threshold", self.bad_threshold.to_string());
        kv("seed", self.seed.to_string());
        kv("quarter", self.quarter.to_string());
        s
    }

    /// Parse `key = value` lines produced by [`Self::to_config_string`] (or
    /// written by hand). Unknown keys are rejected.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidInput(format!(
                    "config line {}: expected 'key = value'",
                    lineno + 1
                )));
            };
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }

    /// Apply one `key = value` override.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| {
            Error::InvalidInput(format!("bad value '{v}' for config key '{k}'"))
        };
        macro_rules! parse {
            ($field:expr, $k:expr, $v:expr) => {
                $field = $v.parse().map_err(|_| bad($k, $v))?
            };
        }
        match key {
            "homomorphic_kernel" => parse!(self.homomorphic_kernel, key, value),
            "homomorphic_epsilon" => parse!(self.homomorphic_epsilon, key, value),
            "gabor_orientations" => {
                let mut out = Vec::new();
                for tok in value.split(',') {
                    out.push(tok.trim().parse().map_err(|_| bad(key, value))?);
                }
                self.gabor_orientations = out;
            }
            "gabor_wavelength_start" => parse!(self.gabor_wavelength_start, key, value),
            "gabor_bandwidth" => parse!(self.gabor_bandwidth, key, value),
            "segmentation_clusters" => parse!(self.segmentation_clusters, key, value),
            "kmeans_replicates" => parse!(self.kmeans_replicates, key, value),
            "kmeans_max_iter" => parse!(self.kmeans_max_iter, key, value),
            "coord_weight" => parse!(self.coord_weight, key, value),
            "feature_quality" => parse!(self.feature_quality, key, value),
            "feature_min_distance" => parse!(self.feature_min_distance, key, value),
            "match_window" => parse!(self.match_window, key, value),
            "match_min_score" => parse!(self.match_min_score, key, value),
            "match_margin" => parse!(self.match_margin, key, value),
            "ncc_template" => parse!(self.ncc_template, key, value),
            "neighbor_mode" => {
                self.neighbor_mode = match value {
                    "bilateral" => NeighborMode::Bilateral,
                    "guided" => NeighborMode::Guided,
                    _ => return Err(bad(key, value)),
                }
            }
            "bilateral_size" => parse!(self.bilateral_size, key, value),
            "bilateral_sigma_spatial" => parse!(self.bilateral_sigma_spatial, key, value),
            "bilateral_sigma_range" => parse!(self.bilateral_sigma_range, key, value),
            "guided_radius" => parse!(self.guided_radius, key, value),
            "guided_epsilon" => parse!(self.guided_epsilon, key, value),
            "alpha_percentile" => parse!(self.alpha_percentile, key, value),
            "lbp_tau" => parse!(self.lbp_tau, key, value),
            "lbp_convergence" => {
                self.lbp_convergence = match value {
                    "absolute_l2" => ConvergenceNorm::AbsoluteL2,
                    "rms" => ConvergenceNorm::Rms,
                    _ => return Err(bad(key, value)),
                }
            }
            "lbp_max_iter" => parse!(self.lbp_max_iter, key, value),
            "lbp_min_iter" => parse!(self.lbp_min_iter, key, value),
            "lbp_damping" => parse!(self.lbp_damping, key, value),
            "lbp_message_floor" => parse!(self.lbp_message_floor, key, value),
            "lrc_tolerance" => parse!(self.lrc_tolerance, key, value),
            "median_window" => parse!(self.median_window, key, value),
            "bad_threshold" => parse!(self.bad_threshold, key, value),
            "seed" => parse!(self.seed, key, value),
            "quarter" => parse!(self.quarter, key, value),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "unknown config key '{key}'"
                )))
            }
        }
        Ok(())
    }
}

/// In-memory result of one full left-reference estimation with
/// post-processing.
pub struct PipelineOutput {
    pub initial: DisparityMap,
    pub fgs: DisparityMap,
    pub final_map: DisparityMap,
    /// Right-reference disparity used for the consistency check.
    pub right_reference: DisparityMap,
    pub occluded_pixels: usize,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationTrace>,
    /// Illumination-corrected reference image (median-filter guide).
    pub corrected_left: GrayImage,
    pub candidate_matches: usize,
}

struct SinglePass {
    initial: DisparityMap,
    fgs: DisparityMap,
    corrected_left: GrayImage,
    /// Per-pixel `[lo, hi]` label support, for the structural-occlusion mask.
    supports: Vec<(i32, i32)>,
    iterations: usize,
    converged: bool,
    trace: Vec<IterationTrace>,
    matches: usize,
}

fn single_pass(
    left: &GrayImage,
    right: &GrayImage,
    ndisp: usize,
    cfg: &PipelineConfig,
) -> Result<SinglePass> {
    let hm = HomomorphicConfig {
        kernel_size: cfg.homomorphic_kernel,
        epsilon_log: cfg.homomorphic_epsilon,
    };
    let corrected_left = homomorphic_correct(left, &hm);
    let corrected_right = homomorphic_correct(right, &hm);

    let seg = segment_texture(&corrected_left, &cfg.segmentation(), cfg.seed)?;

    let d_max = ndisp as i32 - 1;
    let points = detect_candidates(
        &corrected_left,
        cfg.feature_quality,
        cfg.feature_min_distance,
    );
    let matches = match_candidates(
        &corrected_left,
        &corrected_right,
        &points,
        (0, d_max),
        cfg.match_window,
        cfg.match_min_score,
        cfg.match_margin,
    );
    let stats = zonal_ranges(&seg, &matches, 0, d_max);
    let volume = build_cost_volume(
        &corrected_left,
        &corrected_right,
        &seg,
        &stats,
        cfg.ncc_template,
    )?;
    let prior = PriorField::from_volume(&volume);
    let initial = prior.argmax_map();
    let supports = (0..prior.pixel_count())
        .map(|p| {
            let lo = prior.label_lo(p);
            (lo, lo + prior.support_len(p) as i32 - 1)
        })
        .collect();

    let structure = build_dependency_structure(&corrected_left, &cfg.neighborhood());
    let graph = build_graph(prior, structure)?;
    let run = run_lbp(&graph, &cfg.lbp())?;
    let fgs = map_disparity(&run.posterior);

    Ok(SinglePass {
        initial,
        fgs,
        corrected_left,
        supports,
        iterations: run.iterations,
        converged: run.converged,
        trace: run.trace,
        matches: matches.len(),
    })
}

/// Run the full pipeline on in-memory images. `ndisp` bounds the disparity
/// search to `[0, ndisp - 1]`.
pub fn run_pipeline_on_images(
    left: &GrayImage,
    right: &GrayImage,
    ndisp: usize,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if left.width != right.width || left.height != right.height {
        return Err(Error::InvalidInput(format!(
            "stereo pair dimension mismatch: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    if ndisp < 1 {
        return Err(Error::InvalidInput("ndisp must be at least 1".into()));
    }

    let forward = single_pass(left, right, ndisp, cfg)?;

    // Right-reference pass on the mirrored, swapped pair; mirroring keeps
    // disparities positive and the matching direction unchanged.
    let mirrored_left = right.mirrored();
    let mirrored_right = left.mirrored();
    let backward = single_pass(&mirrored_left, &mirrored_right, ndisp, cfg)?;
    let right_reference = backward.fgs.mirrored();

    let mut mask = lrc_mask(&forward.fgs, &right_reference, cfg.lrc_tolerance as f32);
    // Pixels whose whole label support was frame-clipped carried no
    // measured similarity; their estimates are pure smoothing and are
    // treated as occluded so the scanline fill replaces them.
    for (p, (lo, hi)) in forward.supports.iter().enumerate() {
        if !mask.data[p]
            && crate::cost::support_frame_clipped(
                left.width,
                left.height,
                cfg.ncc_template,
                p % left.width,
                p / left.width,
                *lo,
                *hi,
            )
        {
            mask.data[p] = true;
        }
    }
    let filled = fill_occlusions(&forward.fgs, &mask);
    let final_map = weighted_median(
        &filled,
        &forward.corrected_left,
        cfg.median_window,
        cfg.bilateral_sigma_spatial,
        cfg.bilateral_sigma_range,
    );

    Ok(PipelineOutput {
        initial: forward.initial,
        fgs: forward.fgs,
        final_map,
        right_reference,
        occluded_pixels: mask.occluded_count(),
        iterations: forward.iterations,
        converged: forward.converged,
        trace: forward.trace,
        corrected_left: forward.corrected_left,
        candidate_matches: forward.matches,
    })
}

/// Per-stage metric reports for one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    pub weight: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    /// Keyed by stage: "initial", "fgs", "final".
    pub stages: BTreeMap<String, MetricsReport>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// A report file: one or more scenes plus optional weighted aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenes: Vec<SceneReport>,
    pub weighted: Option<WeightedRow>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightedRow {
    pub avg_err: f64,
    pub psnr: f64,
    pub bad: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("bad report JSON: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scene,weight,stage,avg_err,psnr,bad,bad_threshold,evaluated,iterations,wall_time_s\n");
        for s in &self.scenes {
            for (stage, r) in &s.stages {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{},{},{},{:.3}",
                    s.name,
                    s.weight,
                    stage,
                    r.avg_err,
                    r.psnr,
                    r.bad,
                    r.bad_threshold,
                    r.evaluated,
                    s.iterations,
                    s.wall_time_s
                );
            }
            if s.stages.is_empty() {
                let _ = writeln!(
                    out,
                    "{},{},none,,,,,,{},{:.3}",
                    s.name, s.weight, s.iterations, s.wall_time_s
                );
            }
        }
        if let Some(w) = &self.weighted {
            let _ = writeln!(
                out,
                "weighted_average,,final,{:.6},{:.6},{:.6},,,,",
                w.avg_err, w.psnr, w.bad
            );
        }
        out
    }
}

fn scene_name_from(left_path: &Path) -> String {
    left_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| {
            left_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".into())
        })
}

/// Run one stereo pair from disk, writing all artifacts into `out_dir`:
/// `initial/fgs/final` PFMs and colormapped PNGs, signed error maps when
/// ground truth is given, `metrics.json` / `metrics.csv`, `trace.csv`, and
/// the effective `config.txt`.
pub fn run_pipeline(
    left_path: &Path,
    right_path: &Path,
    calib_path: &Path,
    gt_path: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<SceneReport> {
    let started = Instant::now();
    let mut left = io::read_image(left_path)?;
    let mut right = io::read_image(right_path)?;
    let calib = io::parse_calib(calib_path)?;
    let mut ndisp = calib.ndisp;
    let mut gt = gt_path.map(io::read_pfm).transpose()?;

    if cfg.quarter {
        left = left.downsample(4);
        right = right.downsample(4);
        gt = gt.map(|g| g.downsample(4));
        ndisp = (ndisp - 1) / 4 + 1;
    }
    if let Some(g) = &gt {
        if g.width != left.width || g.height != left.height {
            return Err(Error::InvalidInput(format!(
                "ground truth is {}x{} but images are {}x{}",
                g.width, g.height, left.width, left.height
            )));
        }
    }

    let output = run_pipeline_on_images(&left, &right, ndisp, cfg)?;
    std::fs::create_dir_all(out_dir)?;

    let d_max = (ndisp - 1) as f32;
    let stages: [(&str, &DisparityMap); 3] = [
        ("initial", &output.initial),
        ("fgs", &output.fgs),
        ("final", &output.final_map),
    ];
    for (name, map) in &stages {
        io::write_pfm(map, out_dir.join(format!("{name}.pfm")))?;
        io::write_png(
            &render_colormap(map, (0.0, d_max)),
            out_dir.join(format!("{name}.png")),
        )?;
    }
    std::fs::write(out_dir.join("trace.csv"), trace_to_csv(&output.trace))?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_config_string())?;

    let mut report = SceneReport {
        name: scene_name_from(left_path),
        weight: 1.0,
        iterations: output.iterations,
        converged: output.converged,
        wall_time_s: started.elapsed().as_secs_f64(),
        stages: BTreeMap::new(),
        notes: Vec::new(),
    };
    if !output.converged {
        report
            .notes
            .push(format!("did not converge within {} iterations", output.iterations));
    }

    if let Some(gt) = &gt {
        for (name, map) in &stages {
            let r = metrics::evaluate(map, gt, cfg.bad_threshold)?;
            report.stages.insert((*name).into(), r);
            let em = metrics::error_map(map, gt)?;
            io::write_png(
                &render_error_map(&em, 8.0),
                out_dir.join(format!("error_{name}.png")),
            )?;
            if *name == "final" {
                io::write_pfm(&em, out_dir.join("error_final.pfm"))?;
            }
        }
        let initial = report.stages["initial"].avg_err;
        let fgs = report.stages["fgs"].avg_err;
        let fin = report.stages["final"].avg_err;
        if !(fin <= fgs && fgs <= initial) {
            report.notes.push(format!(
                "stage errors not monotone: initial {initial:.3}, fgs {fgs:.3}, final {fin:.3}"
            ));
        }
    }

    let run = RunReport {
        scenes: vec![report.clone()],
        weighted: None,
    };
    std::fs::write(out_dir.join("metrics.json"), run.to_json())?;
    std::fs::write(out_dir.join("metrics.csv"), run.to_csv())?;
    Ok(report)
}

/// Parse a weights file: `name weight` per line, `#` comments allowed.
pub fn parse_weights(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(w)) = (it.next(), it.next()) else {
            return Err(Error::format(path, format!("bad weights line '{line}'")));
        };
        let w: f64 = w
            .parse()
            .map_err(|_| Error::format(path, format!("bad weight '{w}'")))?;
        if !(w > 0.0) {
            return Err(Error::format(path, "weights must be positive"));
        }
        out.insert(name.to_string(), w);
    }
    Ok(out)
}

pub struct DatasetOutcome {
    pub report: RunReport,
    pub summary: Option<WeightedSummary>,
    /// `(scene, reason)` for directories that were skipped.
    pub skipped: Vec<(String, String)>,
}

fn find_scene_file(dir: &Path, stems: &[&str], exts: &[&str]) -> Option<PathBuf> {
    for stem in stems {
        for ext in exts {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Run every scene under `root` (one subdirectory per scene, with
/// `im0`/`im1` images, `calib.txt`, and optional PFM ground truth), writing
/// per-scene artifacts into `out_dir/<scene>` and an aggregate report into
/// `out_dir`. Scenes are processed in parallel.
pub fn run_dataset(
    root: &Path,
    weights: &BTreeMap<String, f64>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<DatasetOutcome> {
    cfg.validate()?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no scene directories under {}",
            root.display()
        )));
    }

    enum Outcome {
        Ran(Box<SceneReport>),
        Skipped(String, String),
    }
    let outcomes: Vec<Outcome> = dirs
        .par_iter()
        .map(|dir| {
            let name = dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".into());
            let img_exts = ["png", "ppm", "pgm"];
            let Some(left) = find_scene_file(dir, &["im0", "view1", "left"], &img_exts) else {
                return Outcome::Skipped(name, "missing left image (im0)".into());
            };
            let Some(right) = find_scene_file(dir, &["im1", "view5", "right"], &img_exts) else {
                return Outcome::Skipped(name, "missing right image (im1)".into());
            };
            let calib = dir.join("calib.txt");
            if !calib.is_file() {
                return Outcome::Skipped(name, "missing calib.txt".into());
            }
            let gt = find_scene_file(dir, &["disp0GT", "disp0", "gt"], &["pfm"]);
            match run_pipeline(
                &left,
                &right,
                &calib,
                gt.as_deref(),
                &out_dir.join(&name),
                cfg,
            ) {
                Ok(mut report) => {
                    report.name = name;
                    report.weight = *weights.get(&report.name).unwrap_or(&1.0);
                    Outcome::Ran(Box::new(report))
                }
                Err(e) => Outcome::Skipped(name, e.to_string()),
            }
        })
        .collect();

    let mut scenes = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Ran(r) => scenes.push(*r),
            Outcome::Skipped(name, why) => skipped.push((name, why)),
        }
    }
    if scenes.is_empty() {
        return Err(Error::InvalidInput(
            "every scene was skipped; nothing to aggregate".into(),
        ));
    }

    // Aggregate over scenes that have final-stage metrics.
    let entries: Vec<SummaryEntry> = scenes
        .iter()
        .filter_map(|s| {
            s.stages.get("final").map(|r| SummaryEntry {
                name: s.name.clone(),
                weight: s.weight,
                report: *r,
            })
        })
        .collect();
    let summary = if entries.is_empty() {
        None
    } else {
        Some(WeightedSummary::from_entries(entries)?)
    };
    let report = RunReport {
        scenes,
        weighted: summary.as_ref().map(|s| WeightedRow {
            avg_err: s.weighted_avg_err,
            psnr: s.weighted_psnr,
            bad: s.weighted_bad,
        }),
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.json"), report.to_json())?;
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    if let Some(s) = &summary {
        std::fs::write(out_dir.join("summary.csv"), s.to_csv())?;
    }
    Ok(DatasetOutcome {
        report,
        summary,
        skipped,
    })
}

/// Side-by-side comparison of two or more report files: per scene, stage,
/// and metric, one CSV row with each report's value and the delta of the
/// last report against the first.
pub fn compare_reports(reports: &[RunReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput("need at least two reports".into()));
    }
    let scene_sets: Vec<std::collections::BTreeSet<&str>> = reports
        .iter()
        .map(|r| r.scenes.iter().map(|s| s.name.as_str()).collect())
        .collect();
    for (i, set) in scene_sets.iter().enumerate().skip(1) {
        if set != &scene_sets[0] {
            let missing: Vec<&&str> = scene_sets[0].difference(set).collect();
            let extra: Vec<&&str> = set.difference(&scene_sets[0]).collect();
            return Err(Error::InvalidInput(format!(
                "report {i} scene set differs from report 0: missing {missing:?}, extra {extra:?}"
            )));
        }
    }

    let mut out = String::from("scene,stage,metric");
    for i in 0..reports.len() {
        let _ = write!(out, ",report{i}");
    }
    out.push_str(",delta\n");
    let metric_of = |r: &MetricsReport, name: &str| -> f64 {
        match name {
            "avg_err" => r.avg_err,
            "psnr" => r.psnr,
            _ => r.bad,
        }
    };
    for scene in scene_sets[0].iter() {
        let per_report: Vec<&SceneReport> = reports
            .iter()
            .map(|r| r.scenes.iter().find(|s| s.name == *scene).unwrap())
            .collect();
        let stages: std::collections::BTreeSet<&str> = per_report
            .iter()
            .flat_map(|s| s.stages.keys().map(|k| k.as_str()))
            .collect();
        for stage in stages {
            for metric in ["avg_err", "psnr", "bad"] {
                let values: Vec<Option<f64>> = per_report
                    .iter()
                    .map(|s| s.stages.get(stage).map(|r| metric_of(r, metric)))
                    .collect();
                let _ = write!(out, "{scene},{stage},{metric}");
                for v in &values {
                    match v {
                        Some(v) => {
                            let _ = write!(out, ",{v:.6}");
                        }
                        None => out.push(','),
                    }
                }
                match (values.first().copied().flatten(), values.last().copied().flatten()) {
                    (Some(a), Some(b)) => {
                        let _ = writeln!(out, ",{:.6}", b - a);
                    }
                    _ => out.push('\n'),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn quick_cfg() -> PipelineConfig {
        PipelineConfig {
            segmentation_clusters: 4,
            kmeans_replicates: 2,
            kmeans_max_iter: 60,
            lbp_max_iter: 25,
            ..Default::default()
        }
    }

    #[test]
    fn config_roundtrip_is_lossless() {
        let mut cfg = PipelineConfig::default();
        cfg.lbp_damping = 0.125;
        cfg.neighbor_mode = NeighborMode::Guided;
        cfg.seed = 123456789;
        cfg.gabor_wavelength_start = 2.83;
        let text = cfg.to_config_string();
        let back = PipelineConfig::from_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_unknown_key() {
        assert!(PipelineConfig::from_config_str("nonsense = 1\n").is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(PipelineConfig::from_config_str("median_window = 4\n").is_err());
        assert!(PipelineConfig::from_config_str("alpha_percentile = 100\n").is_err());
        assert!(PipelineConfig::from_config_str("lbp_damping = 1.5\n").is_err());
    }

    #[test]
    fn pipeline_recovers_constant_shift() {
        let (left, right, _gt) = synth::constant_shift_pair(64, 64, 5, 42);
        let out = run_pipeline_on_images(&left, &right, 16, &quick_cfg()).unwrap();
        let mut good = 0usize;
        let mut total = 0usize;
        for y in 5..59 {
            for x in 5..59 {
                total += 1;
                if out.final_map.get(x, y) == 5.0 {
                    good += 1;
                }
            }
        }
        assert!(
            good as f64 / total as f64 >= 0.99,
            "recovered {good}/{total} interior pixels"
        );
    }

    #[test]
    fn pipeline_rejects_mismatched_pair() {
        let (left, _, _) = synth::constant_shift_pair(32, 24, 3, 1);
        let (right, _, _) = synth::constant_shift_pair(30, 24, 3, 1);
        assert!(run_pipeline_on_images(&left, &right, 8, &quick_cfg()).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let (left, right, _) = synth::constant_shift_pair(48, 40, 4, 9);
        let cfg = quick_cfg();
        let a = run_pipeline_on_images(&left, &right, 12, &cfg).unwrap();
        let b = run_pipeline_on_images(&left, &right, 12, &cfg).unwrap();
        assert_eq!(a.final_map, b.final_map);
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn compare_reports_identity_and_mismatch() {
        let mk = |name: &str| RunReport {
            scenes: vec![SceneReport {
                name: name.into(),
                weight: 1.0,
                iterations: 3,
                converged: true,
                wall_time_s: 0.1,
                stages: BTreeMap::from([(
                    "final".to_string(),
                    MetricsReport {
                        avg_err: 1.0,
                        psnr: 30.0,
                        bad: 5.0,
                        bad_threshold: 2.0,
                        evaluated: 100,
                    },
                )]),
                notes: vec![],
            }],
            weighted: None,
        };
        let csv = compare_reports(&[mk("a"), mk("a")]).unwrap();
        for line in csv.lines().skip(1) {
            let delta = line.rsplit(',').next().unwrap();
            assert_eq!(delta.parse::<f64>().unwrap(), 0.0);
        }
        assert!(compare_reports(&[mk("a"), mk("b")]).is_err());
        assert!(compare_reports(&[mk("a")]).is_err());
    }

    #[test]
    fn weights_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.txt");
        std::fs::write(&path, "# weights\nTeddy 8\nPianoL 4\n").unwrap();
        let w = parse_weights(&path).unwrap();
        assert_eq!(w["Teddy"], 8.0);
        assert_eq!(w["PianoL"], 4.0);
    }
}
