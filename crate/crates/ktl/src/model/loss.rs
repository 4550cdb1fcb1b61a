//! Contrastive descriptor loss and the masked Stage-2 heatmap loss, with
//! exact reverse-mode gradients.

use crate::error::{Error, Result};
use crate::geometry::Point2;

use super::conv::Tensor;
use super::heatmap::{sample_descriptor, sample_descriptor_backward};
use super::Heatmap;

/// Reference to one feature location: which image in the batch, and where on
/// its output grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRef {
    pub image: usize,
    pub position: Point2,
}

/// Positive and negative descriptor pairs for one optimizer step. Negative
/// pairs always live on a single image at a minimum grid distance; the
/// constructor enforces both.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    positives: Vec<(FeatureRef, FeatureRef)>,
    negatives: Vec<(FeatureRef, FeatureRef)>,
}

impl PairBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_positive(&mut self, a: FeatureRef, b: FeatureRef) {
        self.positives.push((a, b));
    }

    /// Rejects pairs that violate the same-image or min-distance constraint.
    pub fn add_negative(&mut self, a: FeatureRef, b: FeatureRef, r_min: f64) -> Result<()> {
        if a.image != b.image {
            return Err(Error::Config(
                "negative pair must come from a single image".into(),
            ));
        }
        if a.position.dist(&b.position) < r_min {
            return Err(Error::Config(format!(
                "negative pair closer than r_min = {r_min}"
            )));
        }
        self.negatives.push((a, b));
        Ok(())
    }

    /// Legacy different-cluster strategy: negatives drawn across images.
    /// Bypasses the same-image constraint; only the ablation grid uses it.
    pub fn add_negative_cross_image(&mut self, a: FeatureRef, b: FeatureRef) {
        self.negatives.push((a, b));
    }

    pub fn positives(&self) -> &[(FeatureRef, FeatureRef)] {
        &self.positives
    }

    pub fn negatives(&self) -> &[(FeatureRef, FeatureRef)] {
        &self.negatives
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contrastive loss over sampled descriptors: positives contribute their
/// squared distance, negatives contribute max(0, margin − squared distance);
/// the sum is normalized by the total pair count.
pub fn contrastive_loss(batch: &PairBatch, feature_maps: &[Tensor], margin: f64) -> Result<f64> {
    contrastive_impl(batch, feature_maps, margin, None)
}

/// Loss value plus gradients w.r.t. each image's normalized feature map.
pub fn contrastive_loss_backward(
    batch: &PairBatch,
    feature_maps: &[Tensor],
    margin: f64,
    d_maps: &mut [Tensor],
) -> Result<f64> {
    contrastive_impl(batch, feature_maps, margin, Some(d_maps))
}

fn contrastive_impl(
    batch: &PairBatch,
    feature_maps: &[Tensor],
    margin: f64,
    mut d_maps: Option<&mut [Tensor]>,
) -> Result<f64> {
    if margin <= 0.0 {
        return Err(Error::Config("margin must be positive".into()));
    }
    if batch.is_empty() {
        return Err(Error::Empty("pair batch (undefined mean)".into()));
    }
    let count = batch.len() as f64;
    let mut total = 0.0;

    let mut handle = |a: &FeatureRef,
                      b: &FeatureRef,
                      positive: bool,
                      d_maps: &mut Option<&mut [Tensor]>|
     -> Result<()> {
        let da = sample_descriptor(&feature_maps[a.image], a.position)?;
        let db = sample_descriptor(&feature_maps[b.image], b.position)?;
        let sq: f64 = da.iter().zip(&db).map(|(x, y)| (x - y) * (x - y)).sum();
        let (contrib, active) = if positive {
            (sq, true)
        } else {
            ((margin - sq).max(0.0), sq < margin)
        };
        total += contrib / count;
        if let Some(maps) = d_maps.as_deref_mut() {
            if active {
                // d(sq)/d(da) = 2(da−db); negatives flip the sign.
                let sign = if positive { 1.0 } else { -1.0 };
                let mut ga = Vec::with_capacity(da.len());
                let mut gb = Vec::with_capacity(da.len());
                for (x, y) in da.iter().zip(&db) {
                    let g = sign * 2.0 * (x - y) / count;
                    ga.push(g);
                    gb.push(-g);
                }
                sample_descriptor_backward(
                    &feature_maps[a.image],
                    a.position,
                    &ga,
                    &mut maps[a.image],
                )?;
                sample_descriptor_backward(
                    &feature_maps[b.image],
                    b.position,
                    &gb,
                    &mut maps[b.image],
                )?;
            }
        }
        Ok(())
    };

    for (a, b) in &batch.positives {
        handle(a, b, true, &mut d_maps)?;
    }
    for (a, b) in &batch.negatives {
        handle(a, b, false, &mut d_maps)?;
    }
    Ok(total)
}

/// Masked Stage-2 error: mean over the detected channels of the per-channel
/// MSE. Channels outside the detected set contribute nothing, in value or in
/// gradient. An empty detected set is an explicit error so callers can skip
/// the sample.
pub fn stage2_loss(predicted: &Heatmap, targets: &Heatmap, detected: &[usize]) -> Result<f64> {
    if predicted.c != targets.c || predicted.h != targets.h || predicted.w != targets.w {
        return Err(Error::DimMismatch(format!(
            "stage2 heatmaps {}x{}x{} vs {}x{}x{}",
            predicted.c, predicted.h, predicted.w, targets.c, targets.h, targets.w
        )));
    }
    if detected.is_empty() {
        return Err(Error::Empty("detected set".into()));
    }
    let plane = predicted.h * predicted.w;
    let mut total = 0.0;
    for &k in detected {
        if k >= predicted.c {
            return Err(Error::Config(format!("channel {k} out of range")));
        }
        let p = &predicted.data[k * plane..(k + 1) * plane];
        let t = &targets.data[k * plane..(k + 1) * plane];
        let mse: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / plane as f64;
        total += mse;
    }
    Ok(total / detected.len() as f64)
}

/// Gradient of `stage2_loss` w.r.t. the prediction; exactly zero on channels
/// outside the detected set.
pub fn stage2_loss_backward(
    predicted: &Heatmap,
    targets: &Heatmap,
    detected: &[usize],
) -> Tensor {
    let plane = predicted.h * predicted.w;
    let scale = 2.0 / (detected.len() as f64 * plane as f64);
    let mut d = Tensor::zeros(predicted.c, predicted.h, predicted.w);
    for &k in detected {
        for i in k * plane..(k + 1) * plane {
            d.data[i] = scale * (predicted.data[i] - targets.data[i]);
        }
    }
    d
}
