//! Warm-up pre-training and the Stage-1 alternating loop: N_iters optimizer
//! steps on the current pseudo-labels, then keypoint re-extraction and
//! correspondence recovery with the model frozen.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::correspondence::{
    flip_labels, recover_correspondence, FeatureItem, LabeledPoint, PseudoLabelSet,
};
use crate::error::{Error, Result};
use crate::geometry::{mirror_px_x, Point2};
use crate::keypoints::KeypointSet;
use crate::model::heatmap::{
    detector_loss, detector_loss_backward, extract_keypoints, render_target, sample_descriptor,
};
use crate::model::loss::{contrastive_loss_backward, PairBatch};
use crate::model::optim::{optimizer_step, RmsPropState};
use crate::model::{
    backward, forward_pass, Dims, ForwardOpts, ForwardPass, Gradients, ModelParams, Section,
};
use crate::raster::Raster;
use crate::rng::{derive_seed, rng_for};
use crate::synth::{sample_transform, Corpus};

use super::pairs::{mine_pairs, MineConfig, PairImage};
use super::{CorrespondenceMode, RoundMetrics, TrainConfig, TrainingState};

/// Immutable context for one training run.
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub train_ids: Vec<usize>,
}

impl<'a> TrainContext<'a> {
    pub fn new(corpus: &'a Corpus, train_ids: Vec<usize>) -> Self {
        Self { corpus, train_ids }
    }

    pub fn dims(&self, cfg: &TrainConfig) -> Dims {
        let mut dims = Dims::new(
            self.corpus.image_size(),
            cfg.hidden_width,
            cfg.descriptor_dim,
            cfg.k,
        );
        dims.landmark_count = cfg.k;
        dims
    }

    fn mine_config(&self, cfg: &TrainConfig, dims: &Dims) -> MineConfig {
        MineConfig {
            positives_cap: cfg.positives_per_pair,
            negatives_cap: cfg.negatives_per_pair,
            r_min: cfg.r_min,
            strategy: cfg.negative_strategy,
            grid_w: dims.output_w,
            grid_h: dims.output_h,
            raster_w: dims.input_w,
            raster_h: dims.input_h,
        }
    }
}

/// One batch slot: an input raster with the pseudo-labels that apply to it.
struct Slot {
    raster: Raster,
    sample_id: usize,
    labels: Vec<LabeledPoint>,
    /// Grid positions for the detector target (empty ⇒ zero target).
    target_points: Vec<Point2>,
}

/// A contrastive pair of batch slots, optionally tied by a known warp.
struct PairSpec {
    a: usize,
    b: usize,
    warp: Option<crate::geometry::GeometricTransform>,
}

fn in_grid(p: &Point2, dims: &Dims) -> bool {
    p.x >= 0.0
        && p.y >= 0.0
        && p.x <= dims.output_w as f64 - 1.0
        && p.y <= dims.output_h as f64 - 1.0
}

/// Assembles one training batch: batch_size/2 base images, each paired with
/// either a synthetic warp of itself or another corpus image.
fn assemble_batch(
    ctx: &TrainContext,
    state: &TrainingState,
    cfg: &TrainConfig,
    dims: &Dims,
    rng: &mut ChaCha8Rng,
) -> (Vec<Slot>, Vec<PairSpec>) {
    let n_pairs = (cfg.batch_size / 2).max(1);
    let mut slots = Vec::with_capacity(n_pairs * 2);
    let mut specs = Vec::with_capacity(n_pairs);

    for _ in 0..n_pairs {
        let (base_slot, base_id) = {
            let id = ctx.train_ids[rng.gen_range(0..ctx.train_ids.len())];
            let mirrored = cfg.flip_augmentation
                && state.flip_labels.is_some()
                && rng.gen_range(0.0..1.0) < 0.5;
            (make_slot(ctx, state, id, mirrored), id)
        };
        let base_idx = slots.len();
        slots.push(base_slot);

        let use_warp = match cfg.correspondence_mode {
            CorrespondenceMode::Equivariance => true,
            CorrespondenceMode::Clustering => rng.gen_range(0.0..1.0) < cfg.warp_probability,
        };
        if use_warp {
            let g = loop {
                let g = sample_transform(cfg.warp_strength, rng);
                if g.validate().is_ok() {
                    break g;
                }
            };
            let base = &slots[base_idx];
            let warped_raster = base.raster.warp(&g).expect("validated transform");
            let mc = ctx.mine_config(cfg, dims);
            let warped_targets: Vec<Point2> = base
                .target_points
                .iter()
                .map(|&p| super::pairs::warp_grid_point(p, &g, &mc))
                .filter(|p| in_grid(p, dims))
                .collect();
            slots.push(Slot {
                raster: warped_raster,
                sample_id: base.sample_id,
                labels: Vec::new(),
                target_points: warped_targets,
            });
            specs.push(PairSpec {
                a: base_idx,
                b: base_idx + 1,
                warp: Some(g),
            });
        } else {
            // A different corpus image.
            let mut other = base_id;
            for _ in 0..10 {
                other = ctx.train_ids[rng.gen_range(0..ctx.train_ids.len())];
                if other != base_id {
                    break;
                }
            }
            let mirrored = cfg.flip_augmentation
                && state.flip_labels.is_some()
                && rng.gen_range(0.0..1.0) < 0.5;
            slots.push(make_slot(ctx, state, other, mirrored));
            specs.push(PairSpec {
                a: base_idx,
                b: base_idx + 1,
                warp: None,
            });
        }
    }
    (slots, specs)
}

/// Builds the slot for one corpus image, using the flipped raster and the
/// flipped-side cluster assignments when mirrored.
fn make_slot(ctx: &TrainContext, state: &TrainingState, id: usize, mirrored: bool) -> Slot {
    let sample = &ctx.corpus.samples[id];
    let (raster, labels) = if mirrored {
        let flip_set = state.flip_labels.as_ref().unwrap();
        (
            sample.raster.mirrored(),
            flip_set.per_image.get(&id).cloned().unwrap_or_default(),
        )
    } else {
        (
            sample.raster.clone(),
            state.labels.per_image.get(&id).cloned().unwrap_or_default(),
        )
    };
    let target_points = labels.iter().map(|l| l.position).collect();
    Slot {
        raster,
        sample_id: id,
        labels,
        target_points,
    }
}

struct StepOutcome {
    l_d: f64,
    l_f: f64,
}

/// One optimizer step over an assembled batch. `train_detector` gates the
/// detector-loss half (off during warm-up).
fn train_step(
    params: &mut ModelParams,
    opt: &mut RmsPropState,
    ctx: &TrainContext,
    slots: &[Slot],
    specs: &[PairSpec],
    cfg: &TrainConfig,
    dims: &Dims,
    train_detector: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let opts = ForwardOpts {
        detector: train_detector,
        descriptor: true,
        stage2: false,
    };
    let passes: Vec<ForwardPass> = slots
        .par_iter()
        .map(|s| forward_pass(params, &s.raster, opts))
        .collect::<Result<_>>()?;

    // Detector loss over every slot (empty targets render a zero map).
    let mut l_d = 0.0;
    let mut d_dets: Vec<Option<crate::model::conv::Tensor>> = vec![None; slots.len()];
    if train_detector {
        let n = slots.len() as f64;
        for (i, (slot, pass)) in slots.iter().zip(&passes).enumerate() {
            let target =
                render_target(&slot.target_points, cfg.sigma, dims.output_h, dims.output_w);
            let pred = pass.detector.as_ref().unwrap();
            l_d += detector_loss(pred, &target)? / n;
            let mut d = detector_loss_backward(pred, &target);
            let scale = cfg.lambda / n;
            d.data.iter_mut().for_each(|v| *v *= scale);
            d_dets[i] = Some(d);
        }
    }

    // Contrastive loss over the mined pairs.
    let mc = ctx.mine_config(cfg, dims);
    let mut batch = PairBatch::new();
    for spec in specs {
        let a = PairImage {
            slot: spec.a,
            sample_id: slots[spec.a].sample_id,
            labels: &slots[spec.a].labels,
        };
        let b = PairImage {
            slot: spec.b,
            sample_id: slots[spec.b].sample_id,
            labels: &slots[spec.b].labels,
        };
        let mined = mine_pairs(&a, &b, spec.warp.as_ref(), &mc, rng)?;
        for (x, y) in mined.positives() {
            batch.add_positive(*x, *y);
        }
        for (x, y) in mined.negatives() {
            batch.add_negative_cross_image(*x, *y);
        }
    }

    let feature_maps: Vec<crate::model::conv::Tensor> = passes
        .iter()
        .map(|p| p.features.clone().unwrap())
        .collect();
    let mut d_feats: Vec<crate::model::conv::Tensor> = feature_maps
        .iter()
        .map(|f| crate::model::conv::Tensor::zeros(f.c, f.h, f.w))
        .collect();
    let l_f = if batch.is_empty() {
        0.0
    } else {
        contrastive_loss_backward(&batch, &feature_maps, cfg.margin, &mut d_feats)?
    };

    let total = cfg.lambda * l_d + l_f;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss (l_d={l_d}, l_f={l_f})")));
    }

    if cfg.two_step_updates && train_detector {
        // Algorithm-1 literal form: detector step, then a fresh forward pass
        // for the descriptor step.
        let grads_d = batch_backward(params, &passes, &d_dets, &vec![None; slots.len()]);
        optimizer_step(
            params,
            &grads_d,
            opt,
            cfg.learning_rate,
            cfg.weight_decay,
            &[Section::Backbone, Section::DetectorHead],
        )?;

        let passes2: Vec<ForwardPass> = slots
            .par_iter()
            .map(|s| forward_pass(params, &s.raster, ForwardOpts::descriptor_only()))
            .collect::<Result<_>>()?;
        let feature_maps2: Vec<crate::model::conv::Tensor> = passes2
            .iter()
            .map(|p| p.features.clone().unwrap())
            .collect();
        let mut d_feats2: Vec<crate::model::conv::Tensor> = feature_maps2
            .iter()
            .map(|f| crate::model::conv::Tensor::zeros(f.c, f.h, f.w))
            .collect();
        let l_f2 = if batch.is_empty() {
            0.0
        } else {
            contrastive_loss_backward(&batch, &feature_maps2, cfg.margin, &mut d_feats2)?
        };
        if !l_f2.is_finite() {
            return Err(Error::NonFinite("contrastive loss".into()));
        }
        let d_feats2: Vec<Option<crate::model::conv::Tensor>> =
            d_feats2.into_iter().map(Some).collect();
        let grads_f = batch_backward(params, &passes2, &vec![None; slots.len()], &d_feats2);
        optimizer_step(
            params,
            &grads_f,
            opt,
            cfg.learning_rate,
            cfg.weight_decay,
            &[Section::Backbone, Section::DescriptorHead],
        )?;
        return Ok(StepOutcome { l_d, l_f: l_f2 });
    }

    let d_feats: Vec<Option<crate::model::conv::Tensor>> = d_feats
        .into_iter()
        .map(|d| if d.data.iter().any(|&v| v != 0.0) { Some(d) } else { None })
        .collect();
    let grads = batch_backward(params, &passes, &d_dets, &d_feats);
    let sections: &[Section] = if train_detector {
        &[Section::Backbone, Section::DetectorHead, Section::DescriptorHead]
    } else {
        &[Section::Backbone, Section::DescriptorHead]
    };
    optimizer_step(params, &grads, opt, cfg.learning_rate, cfg.weight_decay, sections)?;
    Ok(StepOutcome { l_d, l_f })
}

/// Per-slot backward passes in parallel, reduced in slot order.
fn batch_backward(
    params: &ModelParams,
    passes: &[ForwardPass],
    d_dets: &[Option<crate::model::conv::Tensor>],
    d_feats: &[Option<crate::model::conv::Tensor>],
) -> Gradients {
    let per_slot: Vec<Option<Gradients>> = passes
        .par_iter()
        .enumerate()
        .map(|(i, pass)| {
            if d_dets[i].is_none() && d_feats[i].is_none() {
                return None;
            }
            let mut g = Gradients::zeros_like(params);
            backward(
                params,
                pass,
                d_dets[i].clone(),
                d_feats[i].clone(),
                None,
                &mut g,
            );
            Some(g)
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    for g in per_slot.into_iter().flatten() {
        total.add_assign(&g);
    }
    total
}

/// Computes descriptors at keypoint positions for a set of corpus images;
/// with `flip` also returns descriptors sampled on the mirrored rasters at
/// mirrored positions (side 1, same keypoint indices).
pub fn extract_features_at(
    params: &ModelParams,
    corpus: &Corpus,
    keypoints: &BTreeMap<usize, Vec<Point2>>,
    flip: bool,
) -> Result<(Vec<FeatureItem>, Vec<FeatureItem>)> {
    let ids: Vec<usize> = keypoints.keys().copied().collect();
    let per_image: Vec<(Vec<FeatureItem>, Vec<FeatureItem>)> = ids
        .par_iter()
        .map(|&id| -> Result<(Vec<FeatureItem>, Vec<FeatureItem>)> {
            let sample = &corpus.samples[id];
            let positions = &keypoints[&id];
            let pass = forward_pass(params, &sample.raster, ForwardOpts::descriptor_only())?;
            let feat = pass.features.as_ref().unwrap();
            let mut orig = Vec::with_capacity(positions.len());
            for (kp, &p) in positions.iter().enumerate() {
                orig.push(FeatureItem {
                    image_key: (id, 0),
                    keypoint_index: kp,
                    position: p,
                    descriptor: sample_descriptor(feat, p)?,
                });
            }
            let mut flipped = Vec::new();
            if flip {
                let fpass = forward_pass(
                    params,
                    &sample.raster.mirrored(),
                    ForwardOpts::descriptor_only(),
                )?;
                let ffeat = fpass.features.as_ref().unwrap();
                for (kp, &p) in positions.iter().enumerate() {
                    let mp = Point2::new(mirror_px_x(p.x, feat.w), p.y);
                    flipped.push(FeatureItem {
                        image_key: (id, 1),
                        keypoint_index: kp,
                        position: mp,
                        descriptor: sample_descriptor(ffeat, mp)?,
                    });
                }
            }
            Ok((orig, flipped))
        })
        .collect::<Result<_>>()?;
    let mut orig = Vec::new();
    let mut flipped = Vec::new();
    for (o, f) in per_image {
        orig.extend(o);
        flipped.extend(f);
    }
    Ok((orig, flipped))
}

/// Runs NMS keypoint extraction on the frozen detector for each image.
pub fn detect_keypoints(
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[usize],
    cfg: &TrainConfig,
) -> Result<BTreeMap<usize, Vec<Point2>>> {
    let detected: Vec<(usize, Vec<Point2>)> = ids
        .par_iter()
        .map(|&id| -> Result<(usize, Vec<Point2>)> {
            let sample = &corpus.samples[id];
            let pass = forward_pass(
                params,
                &sample.raster,
                ForwardOpts {
                    detector: true,
                    descriptor: false,
                    stage2: false,
                },
            )?;
            let kps = extract_keypoints(
                pass.detector.as_ref().unwrap(),
                cfg.nms_threshold,
                cfg.nms_window,
                cfg.k,
            );
            Ok((id, kps.into_iter().map(|k| k.position).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(detected.into_iter().collect())
}

/// Clusters descriptors at the given keypoints into a fresh pseudo-label set
/// (both sides when flip augmentation is on).
pub fn recluster(
    params: &ModelParams,
    corpus: &Corpus,
    keypoints: &BTreeMap<usize, Vec<Point2>>,
    cfg: &TrainConfig,
    round: usize,
) -> Result<(PseudoLabelSet, Option<PseudoLabelSet>)> {
    let (orig, flipped) =
        extract_features_at(params, corpus, keypoints, cfg.flip_augmentation)?;
    if orig.is_empty() {
        return Err(Error::Empty("no keypoints to cluster".into()));
    }
    let cluster_seed = derive_seed(cfg.seed, "cluster", round as u64);
    if cfg.flip_augmentation {
        let (set0, set1, _) = flip_labels(
            &orig,
            &flipped,
            cfg.k,
            cfg.m,
            cluster_seed,
            cfg.kmeans_iters,
            round,
        )?;
        Ok((set0, Some(set1)))
    } else {
        let (set, _) =
            recover_correspondence(&orig, cfg.k, cfg.m, cluster_seed, cfg.kmeans_iters, round)?;
        Ok((set, None))
    }
}

/// Warm-up: trains Φ_b and Φ_f with synthetic-warp positives only (the
/// detector head is untouched), then clusters the initial keypoints'
/// descriptors into the round-0 pseudo-labels.
pub fn warmup(
    ctx: &TrainContext,
    initial: &BTreeMap<usize, KeypointSet>,
    cfg: &TrainConfig,
) -> Result<TrainingState> {
    cfg.validate()?;
    let dims = ctx.dims(cfg);
    let usable: Vec<usize> = ctx
        .train_ids
        .iter()
        .copied()
        .filter(|id| initial.get(id).map_or(false, |s| !s.points.is_empty()))
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("no training image has keypoints".into()));
    }

    let params = ModelParams::init(dims, derive_seed(cfg.seed, "params", 0));
    let opt = RmsPropState::zeros_like(&params);
    let mut state = TrainingState {
        params,
        opt_state: opt,
        round: 0,
        labels: PseudoLabelSet::default(),
        flip_labels: None,
        metrics: Vec::new(),
    };

    // Initial keypoints as label lists (cluster ids unused during warm-up).
    let as_labels: BTreeMap<usize, Vec<LabeledPoint>> = usable
        .iter()
        .map(|&id| {
            let pts = initial[&id]
                .points
                .iter()
                .enumerate()
                .map(|(i, k)| LabeledPoint {
                    position: k.position,
                    cluster_label: 0,
                    descriptor: Vec::new(),
                    keypoint_index: i,
                })
                .collect();
            (id, pts)
        })
        .collect();

    let mut l_f_sum = 0.0;
    for iter in 0..cfg.warmup_iters {
        let mut rng = rng_for(cfg.seed, "warmup", iter as u64);
        let n_pairs = (cfg.batch_size / 2).max(1);
        let mut slots = Vec::with_capacity(n_pairs * 2);
        let mut specs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let id = usable[rng.gen_range(0..usable.len())];
            let sample = &ctx.corpus.samples[id];
            let labels = as_labels[&id].clone();
            let base_idx = slots.len();
            slots.push(Slot {
                raster: sample.raster.clone(),
                sample_id: id,
                labels,
                target_points: Vec::new(),
            });
            let g = loop {
                let g = sample_transform(cfg.warp_strength, &mut rng);
                if g.validate().is_ok() {
                    break g;
                }
            };
            let warped = slots[base_idx].raster.warp(&g)?;
            slots.push(Slot {
                raster: warped,
                sample_id: id,
                labels: Vec::new(),
                target_points: Vec::new(),
            });
            specs.push(PairSpec {
                a: base_idx,
                b: base_idx + 1,
                warp: Some(g),
            });
        }
        let out = train_step(
            &mut state.params,
            &mut state.opt_state,
            ctx,
            &slots,
            &specs,
            cfg,
            &dims,
            false,
            &mut rng,
        )?;
        l_f_sum += out.l_f;
    }

    // Round-0 labels from the initial keypoints' fresh descriptors.
    let keypoints: BTreeMap<usize, Vec<Point2>> = usable
        .iter()
        .map(|&id| {
            (
                id,
                initial[&id].points.iter().map(|k| k.position).collect(),
            )
        })
        .collect();
    let (labels, flip_set) = recluster(&state.params, ctx.corpus, &keypoints, cfg, 0)?;
    state.metrics.push(RoundMetrics {
        round: 0,
        l_d: 0.0,
        l_f: if cfg.warmup_iters > 0 {
            l_f_sum / cfg.warmup_iters as f64
        } else {
            0.0
        },
        points_per_image: labels.points_per_image(),
    });
    state.labels = labels;
    state.flip_labels = flip_set;
    Ok(state)
}

/// One Stage-1 round: N_iters alternating updates, then re-extraction and
/// re-clustering with Φ frozen. On a non-finite loss the round aborts with
/// the state preserved from the last finite step.
pub fn stage1_round(
    state: &mut TrainingState,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<()> {
    let dims = ctx.dims(cfg);
    let round = state.round;
    let mut l_d_sum = 0.0;
    let mut l_f_sum = 0.0;
    for iter in 0..cfg.recluster_every {
        let step_index = ((round as u64) << 24) | iter as u64;
        let mut rng = rng_for(cfg.seed, "stage1", step_index);
        let (slots, specs) = assemble_batch(ctx, state, cfg, &dims, &mut rng);
        let out = train_step(
            &mut state.params,
            &mut state.opt_state,
            ctx,
            &slots,
            &specs,
            cfg,
            &dims,
            true,
            &mut rng,
        )?;
        l_d_sum += out.l_d;
        l_f_sum += out.l_f;
    }

    // Freeze Φ, re-extract keypoints, recompute correspondences.
    let keypoints = detect_keypoints(&state.params, ctx.corpus, &ctx.train_ids, cfg)?;
    let (labels, flip_set) = recluster(&state.params, ctx.corpus, &keypoints, cfg, round + 1)?;
    state.round = round + 1;
    state.metrics.push(RoundMetrics {
        round: state.round,
        l_d: if cfg.recluster_every > 0 {
            l_d_sum / cfg.recluster_every as f64
        } else {
            0.0
        },
        l_f: if cfg.recluster_every > 0 {
            l_f_sum / cfg.recluster_every as f64
        } else {
            0.0
        },
        points_per_image: labels.points_per_image(),
    });
    state.labels = labels;
    state.flip_labels = flip_set;
    Ok(())
}

/// Warm-up followed by T Stage-1 rounds.
pub fn run_stage1(
    ctx: &TrainContext,
    initial: &BTreeMap<usize, KeypointSet>,
    cfg: &TrainConfig,
) -> Result<TrainingState> {
    let mut state = warmup(ctx, initial, cfg)?;
    for _ in 0..cfg.total_rounds {
        stage1_round(&mut state, ctx, cfg)?;
    }
    Ok(state)
}
