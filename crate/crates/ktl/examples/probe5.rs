use ktl::geometry::raster_to_grid;
use ktl::model::heatmap::sample_descriptor;
use ktl::model::{forward_pass, ForwardOpts};
use ktl::synth::CorpusSpec;
use ktl::training::evaluate::split_corpus;
use ktl::training::rundir::{initial_keypoints, KeypointInit};
use ktl::training::stage1::{warmup, TrainContext};
use ktl::training::TrainConfig;
use std::time::Instant;

fn structure(params: &ktl::model::ModelParams, corpus: &ktl::synth::Corpus, ids: &[usize]) -> (f64, f64, f64) {
    let n_img = 25;
    let k = 15;
    let mut descs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for &id in ids.iter().take(n_img) {
        let s = &corpus.samples[id];
        let pass = forward_pass(params, &s.raster, ForwardOpts::descriptor_only()).unwrap();
        let f = pass.features.as_ref().unwrap();
        for (i, &gt) in s.gt_landmarks.iter().enumerate() {
            let g = raster_to_grid(gt, 2);
            if g.x >= 0.0 && g.y >= 0.0 && g.x <= 31.0 && g.y <= 31.0 {
                descs[i].push(sample_descriptor(f, g).unwrap());
            }
        }
    }
    let cos = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut within = 0.0; let mut wc = 0;
    for i in 0..k {
        for a in 0..descs[i].len().min(10) {
            for b in (a + 1)..descs[i].len().min(10) {
                within += cos(&descs[i][a], &descs[i][b]); wc += 1;
            }
        }
    }
    let mut cross = 0.0; let mut cc = 0;
    let mut worst: f64 = -1.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let mut s = 0.0; let mut c = 0;
            for a in descs[i].iter().take(6) {
                for b in descs[j].iter().take(6) {
                    s += cos(a, b); c += 1;
                }
            }
            let m = s / c as f64;
            cross += m; cc += 1;
            if m > worst { worst = m; }
        }
    }
    (within / wc as f64, cross / cc as f64, worst)
}

fn main() {
    let corpus = CorpusSpec { n_images: 120, template_pool: 1, image_size: 64, deform_strength: 0.25, seed: 42, allow_flips: false, ..CorpusSpec::default() }.generate().unwrap();
    let (train_ids, test_ids) = split_corpus(&corpus, 0.75);
    for &wi in &[600usize, 1800] {
        let cfg = TrainConfig { k: 15, m: 45, warmup_iters: wi, batch_size: 8, seed: 1, ..TrainConfig::default() };
        let init = initial_keypoints(&corpus, &train_ids, &KeypointInit::Mixture { n_points: 15, real_ratio: 1.0, jitter_px: 0.0 }, &cfg).unwrap();
        let ctx = TrainContext::new(&corpus, train_ids.clone());
        let t0 = Instant::now();
        let state = warmup(&ctx, &init, &cfg).unwrap();
        let (w, c, worst) = structure(&state.params, &corpus, &test_ids);
        println!("warmup {wi} ({:?}): ppi={:.2} within={:.3} cross={:.3} worst_pair={:.3}", t0.elapsed(), state.metrics[0].points_per_image, w, c, worst);
    }
}
