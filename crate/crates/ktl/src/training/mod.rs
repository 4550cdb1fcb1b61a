//! Training orchestration: equivariance warm-up, the Stage-1 alternating
//! self-training loop, pair mining, and Stage-2 heatmap-regression training
//! supervised by the recovered correspondences.

pub mod evaluate;
pub mod pairs;
pub mod rundir;
pub mod stage1;
pub mod stage2;

use serde::{Deserialize, Serialize};

use crate::correspondence::PseudoLabelSet;
use crate::error::{Error, Result};
use crate::model::{optim::RmsPropState, ModelParams};

pub use pairs::{mine_pairs, MineConfig, PairImage};
pub use stage1::{run_stage1, stage1_round, warmup};
pub use stage2::{infer, run_stage2, Stage2Outcome};

/// How negative pairs are selected for the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Locations at least r_min cells apart on a single image (keypoint or
    /// not): each landmark appears once per image, so such pairs are always
    /// true negatives.
    SameImage,
    /// Keypoints of the two images whose cluster labels differ. With M ≫ K
    /// two clusters can track the same landmark, so these pairs can be wrong;
    /// kept for the ablation grid.
    DifferentCluster,
}

/// Where positive pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceMode {
    /// Cross-image positives from shared cluster labels, plus synthetic-warp
    /// pairs with probability `warp_probability`.
    Clustering,
    /// Synthetic-warp positives only; clustering still constrains the
    /// detector to K points per image.
    Equivariance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_iters: usize,
    /// N_iters: optimizer steps between clustering rounds.
    pub recluster_every: usize,
    /// T: number of Stage-1 rounds.
    pub total_rounds: usize,
    pub k: usize,
    pub m: usize,
    pub flip_augmentation: bool,
    pub positives_per_pair: usize,
    pub negatives_per_pair: usize,
    pub seed: u64,

    pub negative_strategy: NegativeStrategy,
    pub correspondence_mode: CorrespondenceMode,
    /// Algorithm-1 literal form: two sequential updates per batch (detector
    /// then descriptor, re-running the forward pass in between). The default
    /// sums λ·L_d + L_f into one step.
    pub two_step_updates: bool,
    /// Probability that a contrastive pair partner is a synthetic warp.
    pub warp_probability: f64,
    /// Transform range for synthetic-warp partners (0..1).
    pub warp_strength: f64,
    /// Minimum grid distance for same-image negatives.
    pub r_min: f64,
    pub nms_threshold: f64,
    pub nms_window: usize,
    /// Gaussian σ for target heatmaps, in output-grid cells.
    pub sigma: f64,
    pub kmeans_iters: usize,
    pub stage2_iters: usize,
    pub hidden_width: usize,
    pub descriptor_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.8,
            lambda: 0.1,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            warmup_iters: 600,
            recluster_every: 500,
            total_rounds: 20,
            k: 30,
            m: 100,
            flip_augmentation: false,
            positives_per_pair: 16,
            negatives_per_pair: 32,
            seed: 0,
            negative_strategy: NegativeStrategy::SameImage,
            correspondence_mode: CorrespondenceMode::Clustering,
            two_step_updates: false,
            warp_probability: 0.5,
            warp_strength: 0.3,
            r_min: 4.0,
            nms_threshold: 0.25,
            nms_window: 2,
            sigma: 1.0,
            kmeans_iters: 100,
            stage2_iters: 1500,
            hidden_width: 32,
            descriptor_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config("lambda must be in (0, 1]".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("recluster_every", self.recluster_every),
            ("k", self.k),
            ("m", self.m),
            ("positives_per_pair", self.positives_per_pair),
            ("negatives_per_pair", self.negatives_per_pair),
            ("kmeans_iters", self.kmeans_iters),
            ("hidden_width", self.hidden_width),
            ("descriptor_dim", self.descriptor_dim),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.m < self.k {
            return Err(Error::Config("M must be >= K".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.warp_probability) {
            return Err(Error::Config("warp_probability must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Loss and label statistics for one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub l_d: f64,
    pub l_f: f64,
    pub points_per_image: f64,
}

/// Mutable training state. The per-round RNG streams derive from
/// (config.seed, round, iteration), so the state itself carries no RNG and a
/// resumed run continues bit-identically.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub params: ModelParams,
    pub opt_state: RmsPropState,
    /// Completed clustering rounds (0 = warm-up labels only).
    pub round: usize,
    pub labels: PseudoLabelSet,
    /// Flipped-side labels when flip augmentation is on.
    pub flip_labels: Option<PseudoLabelSet>,
    pub metrics: Vec<RoundMetrics>,
}
