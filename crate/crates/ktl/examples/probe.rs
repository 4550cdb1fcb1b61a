use ktl::geometry::Point2;
use ktl::model::{forward_pass, ForwardOpts};
use ktl::model::heatmap::sample_descriptor;
use ktl::rng::rng_for;
use ktl::synth::{generate_corpus, sample_transform};
use ktl::training::evaluate::{split_corpus, stage1_report, EvalSettings};
use ktl::training::rundir::{initial_keypoints, KeypointInit};
use ktl::training::stage1::{warmup, stage1_round, TrainContext};
use ktl::training::TrainConfig;
use std::time::Instant;

fn cos_probe(params: &ktl::model::ModelParams, corpus: &ktl::synth::Corpus, ids: &[usize], seed: u64) -> f64 {
    // mean cosine similarity of descriptors at (p, g(p)) across held-out transforms
    let mut sims = Vec::new();
    let stride = params.dims.stride();
    let (gw, gh) = (params.dims.output_w, params.dims.output_h);
    for (i, &id) in ids.iter().take(40).enumerate() {
        let mut rng = rng_for(seed, "probe", i as u64);
        let sample = &corpus.samples[id];
        let g = sample_transform(0.5, &mut rng);
        if g.validate().is_err() { continue; }
        let warped = sample.raster.warp(&g).unwrap();
        let p1 = forward_pass(params, &sample.raster, ForwardOpts::descriptor_only()).unwrap();
        let p2 = forward_pass(params, &warped, ForwardOpts::descriptor_only()).unwrap();
        for gt in sample.gt_landmarks.iter() {
            let pg = ktl::geometry::raster_to_grid(*gt, stride);
            let q = g.apply_px(*gt, 64, 64);
            let qg = ktl::geometry::raster_to_grid(q, stride);
            let inside = |p: &Point2| p.x >= 0.0 && p.y >= 0.0 && p.x <= gw as f64 - 1.0 && p.y <= gh as f64 - 1.0;
            if inside(&pg) && inside(&qg) {
                let d1 = sample_descriptor(p1.features.as_ref().unwrap(), pg).unwrap();
                let d2 = sample_descriptor(p2.features.as_ref().unwrap(), qg).unwrap();
                let cos: f64 = d1.iter().zip(&d2).map(|(a, b)| a * b).sum();
                sims.push(cos);
            }
        }
    }
    sims.iter().sum::<f64>() / sims.len() as f64
}

fn main() {
    let t_start = Instant::now();
    let corpus = generate_corpus(120, 1, 64, 0.35, 42).unwrap();
    let (train_ids, test_ids) = split_corpus(&corpus, 0.75);
    println!("corpus: {} train, {} test ({:?})", train_ids.len(), test_ids.len(), t_start.elapsed());

    let cfg = TrainConfig {
        k: 15,
        m: 45,
        warmup_iters: 600,
        recluster_every: 500,
        total_rounds: 3,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = initial_keypoints(&corpus, &train_ids, &KeypointInit::Mixture { n_points: 15, real_ratio: 1.0, jitter_px: 0.0 }, &cfg).unwrap();
    let ctx = TrainContext::new(&corpus, train_ids.clone());

    let t0 = Instant::now();
    let mut state = warmup(&ctx, &init, &cfg).unwrap();
    println!("warmup done in {:?}; cos={:.4} ppi={:.2} l_f={:.4}", t0.elapsed(), cos_probe(&state.params, &corpus, &test_ids, 999), state.metrics[0].points_per_image, state.metrics[0].l_f);

    for r in 0..cfg.total_rounds {
        let t0 = Instant::now();
        stage1_round(&mut state, &ctx, &cfg).unwrap();
        let m = state.metrics.last().unwrap();
        // detector stats on one test image
        let pass = forward_pass(&state.params, &corpus.samples[test_ids[0]].raster, ForwardOpts { detector: true, descriptor: false, stage2: false }).unwrap();
        let det = pass.detector.as_ref().unwrap();
        let maxv = det.data.iter().cloned().fold(f64::MIN, f64::max);
        let kps = ktl::model::heatmap::extract_keypoints(det, cfg.nms_threshold, cfg.nms_window, cfg.k);
        println!("round {} in {:?}: l_d={:.5} l_f={:.5} ppi={:.2} cos={:.4} det_max={:.3} kps={}", r + 1, t0.elapsed(), m.l_d, m.l_f, m.points_per_image, cos_probe(&state.params, &corpus, &test_ids, 999), maxv, kps.len());
    }

    let t0 = Instant::now();
    let settings = EvalSettings::default();
    let report = stage1_report(&state.params, &corpus, &train_ids, &test_ids, &cfg, &settings).unwrap();
    println!("stage1 eval in {:?}: fwd={:.3} bwd={:.3} ppi={:.2}", t0.elapsed(), report.forward_nme, report.backward_nme, report.points_per_image);
    println!("total {:?}", t_start.elapsed());
}
