//! Pipeline-level evaluation: extracts landmarks from a trained model and
//! runs the forward/backward NME protocol. Stage-1 landmark matrices are
//! completed with SVT on the training split and mean-filled at test time;
//! Stage-2 inference always emits exactly K points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::correspondence::{assign_to_centroids, final_k_clustering, SymmetryMap};
use crate::error::{Error, Result};
use crate::eval::{
    forward_backward_eval, mean_complete, svt_complete, EvalReport, LandmarkMatrix,
    NormalizerKind,
};
use crate::eval::svt::{SVT_MAX_ITERS, SVT_STEP};
use crate::geometry::{grid_to_raster, Point2};
use crate::model::ModelParams;
use crate::rng::derive_seed;
use crate::synth::Corpus;

use super::stage1::{detect_keypoints, extract_features_at};
use super::stage2::infer_corpus;
use super::TrainConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub normalizer: NormalizerKind,
    /// Cap on regressor training images.
    pub regressor_train_cap: usize,
    /// Average each Stage-2 channel with its mirrored, symmetry-permuted
    /// counterpart at inference time.
    pub test_flip: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            normalizer: NormalizerKind::BboxSqrtArea,
            regressor_train_cap: 300,
            test_flip: false,
        }
    }
}

fn gt_points(corpus: &Corpus, ids: &[usize]) -> Vec<Vec<Point2>> {
    ids.iter()
        .map(|&id| corpus.samples[id].gt_landmarks.clone())
        .collect()
}

fn labels_to_matrix(
    labels: &BTreeMap<usize, Vec<(usize, Point2)>>,
    ids: &[usize],
    k: usize,
    stride: usize,
) -> LandmarkMatrix {
    let n = ids.len();
    let mut xs = vec![vec![0.0; n]; k];
    let mut ys = vec![vec![0.0; n]; k];
    let mut observed = vec![vec![false; n]; k];
    for (col, id) in ids.iter().enumerate() {
        if let Some(points) = labels.get(id) {
            for &(row, pos) in points {
                let raster = grid_to_raster(pos, stride);
                xs[row][col] = raster.x;
                ys[row][col] = raster.y;
                observed[row][col] = true;
            }
        }
    }
    LandmarkMatrix { xs, ys, observed }
}

fn matrix_to_image_points(matrix: &LandmarkMatrix) -> Vec<Vec<Point2>> {
    (0..matrix.cols())
        .map(|c| {
            (0..matrix.rows())
                .map(|r| Point2::new(matrix.xs[r][c], matrix.ys[r][c]))
                .collect()
        })
        .collect()
}

/// Stage-1 evaluation: final K-clustering of the discovered keypoints, SVT
/// completion on the training split, mean filling on the test split, then
/// forward/backward NME of the completed landmark sets.
pub fn stage1_report(
    params: &ModelParams,
    corpus: &Corpus,
    train_ids: &[usize],
    test_ids: &[usize],
    cfg: &TrainConfig,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let stride = params.dims.stride();
    let k = cfg.k;

    let train_kps = detect_keypoints(params, corpus, train_ids, cfg)?;
    let (train_items, _) = extract_features_at(params, corpus, &train_kps, false)?;
    if train_items.is_empty() {
        return Err(Error::Empty("stage-1 detector found no keypoints".into()));
    }
    let (train_labels, centroids) = final_k_clustering(
        &train_items,
        k,
        derive_seed(cfg.seed, "eval_cluster", 0),
        cfg.kmeans_iters,
        0,
    )?;

    let test_kps = detect_keypoints(params, corpus, test_ids, cfg)?;
    let (test_items, _) = extract_features_at(params, corpus, &test_kps, false)?;
    let test_labels = assign_to_centroids(&test_items, &centroids, 0);

    let to_pairs = |set: &crate::correspondence::PseudoLabelSet| -> BTreeMap<usize, Vec<(usize, Point2)>> {
        set.per_image
            .iter()
            .map(|(&id, pts)| {
                (
                    id,
                    pts.iter().map(|p| (p.cluster_label, p.position)).collect(),
                )
            })
            .collect()
    };
    let train_matrix = labels_to_matrix(&to_pairs(&train_labels), train_ids, k, stride);
    let test_matrix = labels_to_matrix(&to_pairs(&test_labels), test_ids, k, stride);
    let stage1_ppi = {
        let total: usize = test_ids
            .iter()
            .map(|id| test_labels.per_image.get(id).map_or(0, |v| v.len()))
            .sum();
        total as f64 / test_ids.len().max(1) as f64
    };

    let train_completed = svt_complete(&train_matrix, None, SVT_STEP, SVT_MAX_ITERS)?;
    let test_completed = mean_complete(&test_matrix, &train_matrix);

    let mut unsup = matrix_to_image_points(&train_completed);
    unsup.extend(matrix_to_image_points(&test_completed));
    let mut gt = gt_points(corpus, train_ids);
    gt.extend(gt_points(corpus, test_ids));

    let reg_train: Vec<usize> = (0..train_ids.len().min(settings.regressor_train_cap)).collect();
    let test_idx: Vec<usize> = (train_ids.len()..train_ids.len() + test_ids.len()).collect();
    let mut report = forward_backward_eval(&unsup, &gt, &reg_train, &test_idx, settings.normalizer)?;
    report.points_per_image = stage1_ppi;
    Ok(report)
}

/// Stage-2 evaluation: per-channel argmax inference (exactly K points per
/// image) followed by the same regression protocol.
pub fn stage2_report(
    params: &ModelParams,
    corpus: &Corpus,
    train_ids: &[usize],
    test_ids: &[usize],
    symmetry: &SymmetryMap,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let stride = params.dims.stride();
    let all: Vec<usize> = train_ids.iter().chain(test_ids).copied().collect();
    let predictions = infer_corpus(params, corpus, &all, settings.test_flip, symmetry)?;
    let unsup: Vec<Vec<Point2>> = all
        .iter()
        .map(|id| {
            predictions[id]
                .iter()
                .map(|(p, _)| grid_to_raster(*p, stride))
                .collect()
        })
        .collect();
    let mut gt = gt_points(corpus, train_ids);
    gt.extend(gt_points(corpus, test_ids));

    let reg_train: Vec<usize> = (0..train_ids.len().min(settings.regressor_train_cap)).collect();
    let test_idx: Vec<usize> = (train_ids.len()..train_ids.len() + test_ids.len()).collect();
    let mut report = forward_backward_eval(&unsup, &gt, &reg_train, &test_idx, settings.normalizer)?;
    report.points_per_image = params.dims.landmark_count as f64;
    Ok(report)
}

/// Oracle mode: evaluates the ground-truth landmarks against themselves.
pub fn oracle_report(
    corpus: &Corpus,
    train_ids: &[usize],
    test_ids: &[usize],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut gt = gt_points(corpus, train_ids);
    gt.extend(gt_points(corpus, test_ids));
    let reg_train: Vec<usize> = (0..train_ids.len().min(settings.regressor_train_cap)).collect();
    let test_idx: Vec<usize> = (train_ids.len()..train_ids.len() + test_ids.len()).collect();
    forward_backward_eval(&gt.clone(), &gt, &reg_train, &test_idx, settings.normalizer)
}

/// Deterministic train/test split: the first ceil(fraction·n) samples train.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = corpus.samples.len();
    let n_train = ((train_fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    ((0..n_train).collect(), (n_train..n).collect())
}
