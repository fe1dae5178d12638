use fgstereo_core::metrics;
use fgstereo_core::pipeline::*;
use fgstereo_core::synth::*;
use fgstereo_core::image::{DisparityMap, GrayImage};
use rand::{Rng, SeedableRng};

fn scene(w: usize, h: usize, ndisp: usize, seed: u64, min_cell: usize, fine_w: f64, noise: f64)
    -> (GrayImage, GrayImage, DisparityMap) {
    let coarse = value_noise_cells(w, h, 5, min_cell, seed);
    let fine = value_noise(w, h, 2, seed ^ 0xF15E);
    let base = GrayImage { width: w, height: h,
        data: coarse.data.iter().zip(&fine.data).map(|(c, f)| ((1.0-fine_w) * c + fine_w * f).clamp(0.0, 1.0)).collect() };
    let d_lo = (ndisp as i32 / 4).max(1);
    let d_hi = (ndisp as i32 * 3 / 4).max(d_lo + 4);
    // Continuous integer ramp over the full [d_lo, d_hi] span.
    let mut disp: Vec<i32> = (0..w * h).map(|i| {
        let y = i / w;
        let t = y as f64 / (h.max(2) - 1) as f64;
        d_lo + (t * (d_hi - d_lo) as f64).round() as i32
    }).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x0BEC75);
    for r in 0..4 {
        let rw = w / 6 + rng.gen_range(0..w / 6);
        let rh = h / 6 + rng.gen_range(0..h / 6);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let d = d_lo + (d_hi - d_lo) * (r + 3) / 6;
        for y in y0..(y0 + rh).min(h) { for x in x0..(x0 + rw).min(w) {
            disp[y * w + x] = disp[y * w + x].max(d);
        }}
    }
    let right_flat = warp_right(&base, &disp, seed);
    let left = apply_illumination(&base, 0.7, 1.0);
    let right = add_noise(&apply_illumination(&right_flat, 1.0, 0.75), noise, seed ^ 0xA11CE);
    let gt = DisparityMap { width: w, height: h, data: disp.iter().map(|d| *d as f32).collect() };
    (left, right, gt)
}

#[test]
fn sweep() {
    for (min_cell, fine_w, noise, damping) in [
        (4usize, 0.10, 0.03, 0.25),
        (5, 0.08, 0.03, 0.25),
        (5, 0.08, 0.04, 0.25),
        (6, 0.08, 0.03, 0.25),
    ] {
        let (left, right, gt) = scene(225, 188, 48, 7, min_cell, fine_w, noise);
        let cfg = PipelineConfig { lbp_damping: damping, ..Default::default() };
        let out = run_pipeline_on_images(&left, &right, 48, &cfg).unwrap();
        let ri = metrics::evaluate(&out.initial, &gt, 2.0).unwrap();
        let rf = metrics::evaluate(&out.fgs, &gt, 2.0).unwrap();
        let rp = metrics::evaluate(&out.final_map, &gt, 2.0).unwrap();
        let impr = 100.0 * (ri.avg_err - rf.avg_err) / ri.avg_err;
        println!("cell={min_cell} fw={fine_w} n={noise} damp={damping}: init {:.3} fgs {:.3} final {:.3} | impr {:.0}% | iters {} conv {} m={}",
            ri.avg_err, rf.avg_err, rp.avg_err, impr, out.iterations, out.converged, out.candidate_matches);
    }
}

#[test]
fn diagnose() {
    use fgstereo_core::neighborhood::*;
    use fgstereo_core::preprocess::*;
    let (left, right, gt) = scene(225, 188, 48, 7, 4, 0.10, 0.03);
    let cfg = PipelineConfig { lbp_damping: 0.25, ..Default::default() };
    let out = run_pipeline_on_images(&left, &right, 48, &cfg).unwrap();
    // factor degree histogram on the corrected left image
    let hm = HomomorphicConfig { kernel_size: cfg.homomorphic_kernel, epsilon_log: cfg.homomorphic_epsilon };
    let cl = homomorphic_correct(&left, &hm);
    let s = build_dependency_structure(&cl, &cfg.neighborhood());
    let mut hist = std::collections::BTreeMap::new();
    for f in 0..s.factor_count() { *hist.entry(s.members(f).len()).or_insert(0usize) += 1; }
    println!("degree hist: {hist:?}");
    let changed = out.initial.data.iter().zip(&out.fgs.data).filter(|(a, b)| a != b).count();
    println!("pixels changed by LBP: {} / {}", changed, out.initial.data.len());
    for (name, map) in [("initial", &out.initial), ("fgs", &out.fgs), ("final", &out.final_map)] {
        let r = metrics::evaluate(map, &gt, 2.0).unwrap();
        println!("{name}: avg={:.3} bad2={:.2}%", r.avg_err, r.bad);
    }
    // of the pixels that changed, how many got better vs worse?
    let (mut better, mut worse) = (0, 0);
    for i in 0..gt.data.len() {
        let g = gt.data[i];
        let e0 = (out.initial.data[i] - g).abs();
        let e1 = (out.fgs.data[i] - g).abs();
        if e1 < e0 { better += 1; } else if e1 > e0 { worse += 1; }
    }
    println!("better {} worse {}", better, worse);
}

#[test]
fn lbp_knobs() {
    let (left, right, gt) = scene(225, 188, 48, 7, 4, 0.10, 0.03);
    for (alpha, damping, iters, label) in [
        (97.0, 0.25, 60usize, "base"),
        (97.0, 0.0, 60, "nodamp"),
        (95.0, 0.25, 60, "a95"),
        (90.0, 0.25, 60, "a90"),
        (97.0, 0.25, 120, "long"),
    ] {
        let cfg = PipelineConfig { lbp_damping: damping, alpha_percentile: alpha, lbp_max_iter: iters, ..Default::default() };
        let out = run_pipeline_on_images(&left, &right, 48, &cfg).unwrap();
        let ri = metrics::evaluate(&out.initial, &gt, 2.0).unwrap();
        let rf = metrics::evaluate(&out.fgs, &gt, 2.0).unwrap();
        let rp = metrics::evaluate(&out.final_map, &gt, 2.0).unwrap();
        println!("{label}: init {:.3}/{:.1}% fgs {:.3}/{:.1}% fin {:.3}/{:.1}% | impr {:.0}% | it {} conv {}",
            ri.avg_err, ri.bad, rf.avg_err, rf.bad, rp.avg_err, rp.bad,
            100.0 * (ri.avg_err - rf.avg_err) / ri.avg_err, out.iterations, out.converged);
    }
}

#[test]
fn consensus_power() {
    use fgstereo_core::cost::PriorField;
    use fgstereo_core::graph::*;
    use fgstereo_core::neighborhood::NeighborStructure;
    let (w, h) = (30usize, 30usize);
    let n = w * h;
    let labels = 5usize;
    let mut rng_state = 0xABCDu64;
    let mut rnd = move || { rng_state ^= rng_state << 13; rng_state ^= rng_state >> 7; rng_state ^= rng_state << 17; (rng_state >> 11) as f64 / (1u64 << 53) as f64 };
    // true label = 2 everywhere; wrong pixels get confident prior on label 4
    let mut parts = Vec::new();
    let mut wrong_set = vec![false; n];
    for i in 0..n {
        let wrong = rnd() < 0.15;
        wrong_set[i] = wrong;
        let peak = if wrong { 4 } else { 2 };
        let mut p = vec![0.1; labels];
        p[peak] = 0.6;
        parts.push((0i32, p));
    }
    let prior = PriorField::from_parts(w, h, 0, 10, parts).unwrap();
    // 4-neighbor pairwise factors: each pixel + right neighbor (or self alone at border)
    let members: Vec<Vec<u32>> = (0..n).map(|i| {
        let (x, y) = (i % w, i / w);
        let mut m = vec![i as u32];
        if x + 1 < w { m.push((i + 1) as u32); }
        if y + 1 < h { m.push((i + w) as u32); }
        m
    }).collect();
    let structure = NeighborStructure::from_member_lists(w, h, members);
    let g = build_graph(prior, structure).unwrap();
    for damping in [0.0, 0.25] {
        let cfg = LbpConfig { damping, min_iter: 1, max_iter: 60, ..Default::default() };
        let run = run_lbp(&g, &cfg).unwrap();
        let map = map_disparity(&run.posterior);
        let fixed = (0..n).filter(|i| wrong_set[*i] && map.data[*i] == 2.0).count();
        let broken = (0..n).filter(|i| !wrong_set[*i] && map.data[*i] != 2.0).count();
        let total_wrong = wrong_set.iter().filter(|b| **b).count();
        println!("damp={damping}: fixed {fixed}/{total_wrong} broke {broken} iters {} conv {}", run.iterations, run.converged);
    }
}
