use fgstereo_core::pipeline::*;
use fgstereo_core::synth;

#[test]
fn stage_accuracy() {
    let (left, right, _gt) = synth::constant_shift_pair(64, 64, 5, 42);
    let cfg = PipelineConfig {
        segmentation_clusters: 4,
        kmeans_replicates: 2,
        kmeans_max_iter: 60,
        lbp_max_iter: 25,
        ..Default::default()
    };
    let out = run_pipeline_on_images(&left, &right, 16, &cfg).unwrap();
    for (name, map) in [("initial", &out.initial), ("fgs", &out.fgs), ("final", &out.final_map), ("rightref", &out.right_reference)] {
        let mut good = 0; let mut total = 0;
        let mut wrong_locs = vec![];
        for y in 5..59 { for x in 5..59 {
            total += 1;
            if map.get(x, y) == 5.0 { good += 1; } else if wrong_locs.len() < 12 { wrong_locs.push((x, y, map.get(x,y))); }
        }}
        println!("{name}: {good}/{total} = {:.2}%  wrong: {:?}", 100.0*good as f64/total as f64, wrong_locs);
    }
    println!("occluded: {} matches: {} iters: {} conv: {}", out.occluded_pixels, out.candidate_matches, out.iterations, out.converged);
}
