use ktl::geometry::raster_to_grid;
use ktl::synth::CorpusSpec;
use ktl::training::evaluate::{split_corpus, stage1_report, EvalSettings};
use ktl::training::rundir::{initial_keypoints, KeypointInit};
use ktl::training::stage1::{warmup, stage1_round, TrainContext};
use ktl::training::TrainConfig;
use std::collections::BTreeMap;
use std::time::Instant;

fn label_quality(state: &ktl::training::TrainingState, corpus: &ktl::synth::Corpus) -> (f64, f64, f64) {
    // For each labeled point: nearest gt landmark within 2 cells, else junk.
    // Cluster purity: majority landmark fraction per cluster.
    let mut cluster_members: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
    let mut junk = 0usize;
    let mut total = 0usize;
    for (&id, pts) in &state.labels.per_image {
        let gt: Vec<_> = corpus.samples[id].gt_landmarks.iter().map(|&p| raster_to_grid(p, 2)).collect();
        for p in pts {
            total += 1;
            let mut best = (-1i64, f64::INFINITY);
            for (gi, g) in gt.iter().enumerate() {
                let d = g.dist(&p.position);
                if d < best.1 { best = (gi as i64, d); }
            }
            let lm = if best.1 <= 2.0 { best.0 } else { junk += 1; -1 };
            cluster_members.entry(p.cluster_label).or_default().push(lm);
        }
    }
    let mut purity_sum = 0.0;
    let mut weight = 0usize;
    for members in cluster_members.values() {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for &m in members { *counts.entry(m).or_default() += 1; }
        let max = counts.values().max().copied().unwrap_or(0);
        purity_sum += max as f64;
        weight += members.len();
    }
    (purity_sum / weight as f64, junk as f64 / total as f64, state.labels.points_per_image())
}

fn main() {
    let corpus = CorpusSpec { n_images: 120, template_pool: 1, image_size: 64, deform_strength: 0.25, seed: 42, allow_flips: false, ..CorpusSpec::default() }.generate().unwrap();
    let (train_ids, test_ids) = split_corpus(&corpus, 0.75);
    let cfg = TrainConfig {
        k: 15, m: 45,
        warmup_iters: 600,
        recluster_every: 400,
        total_rounds: 8,
        batch_size: 8,
        nms_threshold: 0.1,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = initial_keypoints(&corpus, &train_ids, &KeypointInit::Mixture { n_points: 15, real_ratio: 1.0, jitter_px: 0.0 }, &cfg).unwrap();
    let ctx = TrainContext::new(&corpus, train_ids.clone());
    let t0 = Instant::now();
    let mut state = warmup(&ctx, &init, &cfg).unwrap();
    let (pur, junk, ppi) = label_quality(&state, &corpus);
    println!("warmup ({:.0}s): purity={:.3} junk={:.3} ppi={:.2}", t0.elapsed().as_secs_f64(), pur, junk, ppi);
    for r in 0..cfg.total_rounds {
        let t0 = Instant::now();
        if let Err(e) = stage1_round(&mut state, &ctx, &cfg) {
            println!("round {} failed: {e}", r + 1);
            return;
        }
        let (pur, junk, ppi) = label_quality(&state, &corpus);
        println!("round {} ({:.0}s): l_d={:.4} l_f={:.4} purity={:.3} junk={:.3} ppi={:.2}",
            r + 1, t0.elapsed().as_secs_f64(), state.metrics.last().unwrap().l_d, state.metrics.last().unwrap().l_f, pur, junk, ppi);
    }
    let report = stage1_report(&state.params, &corpus, &train_ids, &test_ids, &cfg, &EvalSettings::default()).unwrap();
    println!("stage1: fwd={:.3} bwd={:.3} ppi={:.2}", report.forward_nme, report.backward_nme, report.points_per_image);
}
