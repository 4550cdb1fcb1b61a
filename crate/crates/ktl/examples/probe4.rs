use ktl::geometry::raster_to_grid;
use ktl::model::heatmap::sample_descriptor;
use ktl::model::{forward_pass, ForwardOpts};
use ktl::synth::CorpusSpec;
use ktl::training::evaluate::split_corpus;
use ktl::training::rundir::{initial_keypoints, KeypointInit};
use ktl::training::stage1::{warmup, TrainContext};
use ktl::training::TrainConfig;

fn main() {
    let corpus = CorpusSpec { n_images: 120, template_pool: 1, image_size: 64, deform_strength: 0.25, seed: 42, allow_flips: false, ..CorpusSpec::default() }.generate().unwrap();
    let (train_ids, _) = split_corpus(&corpus, 0.75);
    let cfg = TrainConfig { k: 15, m: 45, warmup_iters: 600, batch_size: 8, seed: 1, ..TrainConfig::default() };
    let init = initial_keypoints(&corpus, &train_ids, &KeypointInit::Mixture { n_points: 15, real_ratio: 1.0, jitter_px: 0.0 }, &cfg).unwrap();
    let ctx = TrainContext::new(&corpus, train_ids.clone());
    let state = warmup(&ctx, &init, &cfg).unwrap();

    // Descriptors at gt landmarks for 30 images: 15 landmarks x 30 images
    let n_img = 30;
    let k = 15;
    let mut descs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k]; // per landmark
    for &id in train_ids.iter().take(n_img) {
        let s = &corpus.samples[id];
        let pass = forward_pass(&state.params, &s.raster, ForwardOpts::descriptor_only()).unwrap();
        let f = pass.features.as_ref().unwrap();
        for (i, &gt) in s.gt_landmarks.iter().enumerate() {
            let g = raster_to_grid(gt, 2);
            if g.x >= 0.0 && g.y >= 0.0 && g.x <= 31.0 && g.y <= 31.0 {
                descs[i].push(sample_descriptor(f, g).unwrap());
            }
        }
    }
    let cos = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    // within-landmark mean cos
    let mut within = Vec::new();
    for i in 0..k {
        let mut s = 0.0; let mut c = 0;
        for a in 0..descs[i].len() {
            for b in (a + 1)..descs[i].len() {
                s += cos(&descs[i][a], &descs[i][b]); c += 1;
            }
        }
        within.push(s / c as f64);
    }
    // cross-landmark mean cos (first descriptor of each)
    let mut cross = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0; let mut c = 0;
            for a in descs[i].iter().take(8) {
                for b in descs[j].iter().take(8) {
                    s += cos(a, b); c += 1;
                }
            }
            cross[i][j] = s / c as f64;
        }
    }
    println!("within-landmark cos: {:?}", within.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("cross matrix (x100, row=landmark):");
    for i in 0..k {
        let row: Vec<i64> = cross[i].iter().map(|v| (v * 100.0).round() as i64).collect();
        println!("{:2}: {:?}", i, row);
    }
    // background descriptor similarity to landmarks
    let s = &corpus.samples[train_ids[0]];
    let pass = forward_pass(&state.params, &s.raster, ForwardOpts::descriptor_only()).unwrap();
    let f = pass.features.as_ref().unwrap();
    let bg = sample_descriptor(f, ktl::geometry::Point2::new(2.0, 2.0)).unwrap();
    let sims: Vec<i64> = (0..k).map(|i| (cos(&bg, &descs[i][0]) * 100.0).round() as i64).collect();
    println!("bg vs landmarks: {:?}", sims);
}
