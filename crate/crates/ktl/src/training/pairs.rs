//! Positive/negative pair mining for the contrastive loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::correspondence::LabeledPoint;
use crate::error::Result;
use crate::geometry::{grid_to_raster, raster_to_grid, GeometricTransform, Point2};
use crate::model::loss::{FeatureRef, PairBatch};

use super::NegativeStrategy;

/// One side of a contrastive image pair: a batch slot plus its labelled
/// keypoints (positions in output-grid coordinates).
pub struct PairImage<'a> {
    pub slot: usize,
    pub sample_id: usize,
    pub labels: &'a [LabeledPoint],
}

#[derive(Debug, Clone, Copy)]
pub struct MineConfig {
    pub positives_cap: usize,
    pub negatives_cap: usize,
    pub r_min: f64,
    pub strategy: NegativeStrategy,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Raster size backing the grid (for mapping warp transforms).
    pub raster_w: usize,
    pub raster_h: usize,
}

impl MineConfig {
    fn in_grid(&self, p: &Point2) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= self.grid_w as f64 - 1.0
            && p.y <= self.grid_h as f64 - 1.0
    }
}

/// Maps an output-grid point through a raster-space transform.
pub fn warp_grid_point(p: Point2, g: &GeometricTransform, cfg: &MineConfig) -> Point2 {
    let stride = cfg.raster_w / cfg.grid_w;
    raster_to_grid(
        g.apply_px(grid_to_raster(p, stride), cfg.raster_w, cfg.raster_h),
        stride,
    )
}

/// Mines the pair batch for one image pair.
///
/// Positives: cross-image keypoint pairs sharing a cluster label; when `b` is
/// a synthetic warp of `a` (transform supplied), the known correspondences
/// (p, g(p)) are used instead. Negatives come from single images: an anchor
/// keypoint against a random location at least r_min cells away (any
/// location is informative — a landmark appears once per image). The
/// different-cluster strategy instead pairs keypoints of the two images with
/// unequal labels. An empty-positive batch is returned as-is; the caller may
/// resample.
pub fn mine_pairs(
    a: &PairImage,
    b: &PairImage,
    transform: Option<&GeometricTransform>,
    cfg: &MineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let mut batch = PairBatch::new();

    match transform {
        Some(g) => {
            // Known synthetic correspondences.
            let mut order: Vec<usize> = (0..a.labels.len()).collect();
            shuffle(&mut order, rng);
            for &i in order.iter() {
                if batch.positives().len() >= cfg.positives_cap {
                    break;
                }
                let p = a.labels[i].position;
                let q = warp_grid_point(p, g, cfg);
                if cfg.in_grid(&q) {
                    batch.add_positive(
                        FeatureRef { image: a.slot, position: p },
                        FeatureRef { image: b.slot, position: q },
                    );
                }
            }
        }
        None => {
            // Cross-image positives from matching cluster labels.
            let mut matches: Vec<(usize, usize)> = Vec::new();
            for (i, pa) in a.labels.iter().enumerate() {
                for (j, pb) in b.labels.iter().enumerate() {
                    if pa.cluster_label == pb.cluster_label && a.sample_id != b.sample_id {
                        matches.push((i, j));
                    }
                }
            }
            shuffle(&mut matches, rng);
            for &(i, j) in matches.iter().take(cfg.positives_cap) {
                batch.add_positive(
                    FeatureRef { image: a.slot, position: a.labels[i].position },
                    FeatureRef { image: b.slot, position: b.labels[j].position },
                );
            }
        }
    }

    match cfg.strategy {
        NegativeStrategy::SameImage => {
            let half = cfg.negatives_cap / 2;
            mine_same_image_negatives(a, half, cfg, rng, &mut batch)?;
            mine_same_image_negatives(b, cfg.negatives_cap - half, cfg, rng, &mut batch)?;
        }
        NegativeStrategy::DifferentCluster => {
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for (i, pa) in a.labels.iter().enumerate() {
                for (j, pb) in b.labels.iter().enumerate() {
                    if pa.cluster_label != pb.cluster_label {
                        candidates.push((i, j));
                    }
                }
            }
            shuffle(&mut candidates, rng);
            for &(i, j) in candidates.iter().take(cfg.negatives_cap) {
                batch.add_negative_cross_image(
                    FeatureRef { image: a.slot, position: a.labels[i].position },
                    FeatureRef { image: b.slot, position: b.labels[j].position },
                );
            }
        }
    }
    Ok(batch)
}

fn mine_same_image_negatives(
    img: &PairImage,
    count: usize,
    cfg: &MineConfig,
    rng: &mut ChaCha8Rng,
    batch: &mut PairBatch,
) -> Result<()> {
    if img.labels.is_empty() {
        return Ok(());
    }
    let max_x = cfg.grid_w as f64 - 1.0;
    let max_y = cfg.grid_h as f64 - 1.0;
    let mut added = 0;
    let mut attempts = 0;
    while added < count && attempts < count * 50 {
        attempts += 1;
        let anchor = img.labels[rng.gen_range(0..img.labels.len())].position;
        // Half the partners are other keypoints of the same image, half are
        // arbitrary grid locations; a landmark appears once per image, so
        // both kinds are true negatives.
        let other = if img.labels.len() > 1 && rng.gen_range(0.0..1.0) < 0.5 {
            img.labels[rng.gen_range(0..img.labels.len())].position
        } else {
            Point2::new(rng.gen_range(0.0..max_x), rng.gen_range(0.0..max_y))
        };
        if anchor.dist(&other) >= cfg.r_min {
            batch.add_negative(
                FeatureRef { image: img.slot, position: anchor },
                FeatureRef { image: img.slot, position: other },
                cfg.r_min,
            )?;
            added += 1;
        }
    }
    Ok(())
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
