//! Stage 2: trains the K-channel detector Ψ on the recovered correspondences
//! using masked heatmap regression, plus flip-aware inference.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::correspondence::{
    cluster_symmetry_map, final_k_clustering, final_k_clustering_flip, PseudoLabelSet, SymmetryMap,
};
use crate::error::{Error, Result};
use crate::geometry::{mirror_px_x, Point2};
use crate::model::conv::Tensor;
use crate::model::heatmap::render_into;
use crate::model::loss::{stage2_loss, stage2_loss_backward};
use crate::model::optim::{optimizer_step, RmsPropState};
use crate::model::{
    backward, forward_pass, ForwardOpts, ForwardPass, Gradients, Heatmap, ModelParams, Section,
};
use crate::raster::Raster;
use crate::rng::{derive_seed, rng_for};
use crate::synth::Corpus;

use super::stage1::{detect_keypoints, extract_features_at, TrainContext};
use super::{TrainConfig, TrainingState};

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub params: ModelParams,
    /// Final K-indexed pseudo-labels on the training split.
    pub final_labels: PseudoLabelSet,
    /// Landmark-index symmetry map (identity when flips are off).
    pub symmetry: SymmetryMap,
    /// (iteration, loss) samples of the training curve.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Trains Ψ. The final K-way clustering assigns landmark indices; per image
/// the detected channels form D_j and only those carry loss. Ψ shares the
/// backbone with Φ and its head starts from the detector head's hidden layer
/// (final layer from scratch).
pub fn run_stage2(
    state: &TrainingState,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let dims = ctx.dims(cfg);

    // Landmark indices from the final K-clustering of Stage-1 output.
    let keypoints = detect_keypoints(&state.params, ctx.corpus, &ctx.train_ids, cfg)?;
    let (orig_items, flip_items) =
        extract_features_at(&state.params, ctx.corpus, &keypoints, cfg.flip_augmentation)?;
    if orig_items.is_empty() {
        return Err(Error::Empty("stage-1 produced no keypoints".into()));
    }
    let seed = derive_seed(cfg.seed, "stage2_cluster", 0);
    let (final_labels, flip_final, symmetry) = if cfg.flip_augmentation {
        let (set0, set1, _) = final_k_clustering_flip(
            &orig_items,
            &flip_items,
            cfg.k,
            seed,
            cfg.kmeans_iters,
            state.round,
        )?;
        let map = cluster_symmetry_map(&set0, &set1)?;
        (set0, Some(set1), map)
    } else {
        let (set, _) =
            final_k_clustering(&orig_items, cfg.k, seed, cfg.kmeans_iters, state.round)?;
        let map = SymmetryMap::identity(cfg.k);
        (set, None, map)
    };
    let _ = flip_final;

    let mut params = state.params.clone();
    params.init_stage2_from_detector(derive_seed(cfg.seed, "stage2_head", 0));
    let mut opt = RmsPropState::zeros_like(&params);

    // Images with at least one detected landmark.
    let trainable: Vec<usize> = ctx
        .train_ids
        .iter()
        .copied()
        .filter(|id| final_labels.per_image.get(id).map_or(false, |v| !v.is_empty()))
        .collect();
    if trainable.is_empty() {
        return Err(Error::Empty("every image has an empty detected set".into()));
    }

    let mut loss_curve = Vec::new();
    for iter in 0..cfg.stage2_iters {
        let mut rng = rng_for(cfg.seed, "stage2", iter as u64);
        let mut slots: Vec<(Raster, Heatmap, Vec<usize>)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let id = trainable[rng.gen_range(0..trainable.len())];
            let sample = &ctx.corpus.samples[id];
            let points = &final_labels.per_image[&id];
            let mirrored = cfg.flip_augmentation && rng.gen_range(0.0..1.0) < 0.5;
            let mut target = Tensor::zeros(cfg.k, dims.output_h, dims.output_w);
            let mut detected = Vec::with_capacity(points.len());
            for p in points {
                let (channel, pos) = if mirrored {
                    (
                        symmetry.perm[p.cluster_label],
                        Point2::new(mirror_px_x(p.position.x, dims.output_w), p.position.y),
                    )
                } else {
                    (p.cluster_label, p.position)
                };
                render_into(&mut target, channel, &[pos], cfg.sigma);
                detected.push(channel);
            }
            detected.sort_unstable();
            let raster = if mirrored {
                sample.raster.mirrored()
            } else {
                sample.raster.clone()
            };
            slots.push((raster, target, detected));
        }

        let passes: Vec<ForwardPass> = slots
            .par_iter()
            .map(|(raster, _, _)| forward_pass(&params, raster, ForwardOpts::stage2_only()))
            .collect::<Result<_>>()?;

        let n = slots.len() as f64;
        let mut batch_loss = 0.0;
        let mut d_outs: Vec<Option<Tensor>> = Vec::with_capacity(slots.len());
        for ((_, target, detected), pass) in slots.iter().zip(&passes) {
            let pred = pass.stage2.as_ref().unwrap();
            batch_loss += stage2_loss(pred, target, detected)? / n;
            let mut d = stage2_loss_backward(pred, target, detected);
            d.data.iter_mut().for_each(|v| *v /= n);
            d_outs.push(Some(d));
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite("stage-2 loss".into()));
        }

        let per_slot: Vec<Gradients> = passes
            .par_iter()
            .zip(&d_outs)
            .map(|(pass, d)| {
                let mut g = Gradients::zeros_like(&params);
                backward(&params, pass, None, None, d.clone(), &mut g);
                g
            })
            .collect();
        let mut grads = Gradients::zeros_like(&params);
        for g in &per_slot {
            grads.add_assign(g);
        }
        optimizer_step(
            &mut params,
            &grads,
            &mut opt,
            cfg.learning_rate,
            cfg.weight_decay,
            &[Section::Backbone, Section::Stage2Head],
        )?;
        if iter % 50 == 0 || iter + 1 == cfg.stage2_iters {
            loss_curve.push((iter, batch_loss));
        }
    }

    Ok(Stage2Outcome {
        params,
        final_labels,
        symmetry,
        loss_curve,
    })
}

/// Per-channel argmax inference: K ordered landmark positions with
/// confidences. With `test_flip`, each channel's map is averaged with the
/// symmetry-permuted, mirrored map computed on the flipped raster.
pub fn infer(
    params: &ModelParams,
    raster: &Raster,
    test_flip: bool,
    symmetry: &SymmetryMap,
) -> Result<Vec<(Point2, f64)>> {
    let pass = forward_pass(params, raster, ForwardOpts::stage2_only())?;
    let maps = pass.stage2.as_ref().unwrap();
    let k = maps.c;
    let combined = if test_flip {
        let fpass = forward_pass(params, &raster.mirrored(), ForwardOpts::stage2_only())?;
        let fmaps = fpass.stage2.as_ref().unwrap();
        let mut out = maps.clone();
        let plane = maps.h * maps.w;
        for ch in 0..k {
            let sch = symmetry.perm[ch];
            for y in 0..maps.h {
                for x in 0..maps.w {
                    let mx = (maps.w - 1) - x;
                    out.data[ch * plane + y * maps.w + x] = 0.5
                        * (maps.data[ch * plane + y * maps.w + x]
                            + fmaps.data[sch * plane + y * maps.w + mx]);
                }
            }
        }
        out
    } else {
        maps.clone()
    };

    let mut results = Vec::with_capacity(k);
    for ch in 0..k {
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for y in 0..combined.h {
            for x in 0..combined.w {
                let v = combined.at(ch, y, x);
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        results.push((
            Point2::new(best.0 as f64, best.1 as f64),
            best.2.clamp(0.0, 1.0),
        ));
    }
    Ok(results)
}

/// Stage-2 landmark predictions for a set of corpus images, keyed by sample.
pub fn infer_corpus(
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[usize],
    test_flip: bool,
    symmetry: &SymmetryMap,
) -> Result<BTreeMap<usize, Vec<(Point2, f64)>>> {
    let rows: Vec<(usize, Vec<(Point2, f64)>)> = ids
        .par_iter()
        .map(|&id| -> Result<(usize, Vec<(Point2, f64)>)> {
            Ok((
                id,
                infer(params, &corpus.samples[id].raster, test_flip, symmetry)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}
