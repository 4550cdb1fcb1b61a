//! Correspondence recovery: constrained two-pass K-means over keypoint
//! descriptors, per-image duplicate filtering, flip-aware labelling, the
//! cluster symmetry map, and the final K-way clustering feeding Stage 2.
//!
//! The per-image constraint — at most one keypoint per cluster — is realized
//! by keeping, for each (image, cluster) pair, the keypoint whose descriptor
//! is closest to the centroid. Clustering runs twice: first with M = K purely
//! as a filter capping every image at K points (labels discarded), then with
//! M ≫ K on the survivors to form the pseudo-labels, so several clusters may
//! cover viewpoint variants of one landmark.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hungarian::hungarian;
use crate::geometry::Point2;
use crate::rng::rng_for;

/// Number of seeded k-means++ restarts; the lowest-inertia run wins.
const KMEANS_RESTARTS: usize = 4;

#[derive(Debug, Clone)]
pub struct CentroidSet {
    pub centroids: Vec<Vec<f64>>,
    pub m: usize,
    pub iteration_count: usize,
    /// Sum of squared distances of every feature to its assigned centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

/// One labelled keypoint in a pseudo-label set. `keypoint_index` ties the
/// entry back to the source keypoint list (used for flip pairing); it is not
/// persisted.
#[derive(Debug, Clone)]
pub struct LabeledPoint {
    pub position: Point2,
    pub cluster_label: usize,
    pub descriptor: Vec<f64>,
    pub keypoint_index: usize,
}

/// Per-image pseudo-labels for one training round. Labels are unique per
/// image and every image carries at most K points.
#[derive(Debug, Clone, Default)]
pub struct PseudoLabelSet {
    pub round: usize,
    pub per_image: BTreeMap<usize, Vec<LabeledPoint>>,
    pub m: usize,
}

impl PseudoLabelSet {
    pub fn total_points(&self) -> usize {
        self.per_image.values().map(|v| v.len()).sum()
    }

    pub fn points_per_image(&self) -> f64 {
        if self.per_image.is_empty() {
            0.0
        } else {
            self.total_points() as f64 / self.per_image.len() as f64
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for (id, pts) in &self.per_image {
            if pts.len() > k {
                return Err(Error::Config(format!(
                    "image {id} has {} points, more than K = {k}",
                    pts.len()
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for p in pts {
                if p.cluster_label >= self.m {
                    return Err(Error::Config(format!(
                        "image {id}: label {} out of range M = {}",
                        p.cluster_label, self.m
                    )));
                }
                if !seen.insert(p.cluster_label) {
                    return Err(Error::Config(format!(
                        "image {id}: duplicate cluster {}",
                        p.cluster_label
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, deterministic given the seed.
/// Empty clusters are re-seeded from the feature farthest from its centroid;
/// iteration stops when assignments no longer change or `max_iters` is hit.
/// Returns the centroid set plus the per-feature assignment.
pub fn kmeans(
    features: &[Vec<f64>],
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(CentroidSet, Vec<usize>)> {
    if m == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    if features.len() < m {
        return Err(Error::NotEnoughFeatures {
            needed: m,
            available: features.len(),
            context: "kmeans".into(),
        });
    }
    let mut best: Option<(CentroidSet, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = kmeans_single(features, m, seed, restart as u64, max_iters);
        match &best {
            Some((b, _)) if b.inertia <= run.0.inertia => {}
            _ => best = Some(run),
        }
    }
    Ok(best.unwrap())
}

fn kmeans_single(
    features: &[Vec<f64>],
    m: usize,
    seed: u64,
    restart: u64,
    max_iters: usize,
) -> (CentroidSet, Vec<usize>) {
    let mut rng = rng_for(seed, "kmeans", restart);
    let mut centroids = plus_plus_seed(features, m, &mut rng);
    let mut assignment = vec![usize::MAX; features.len()];
    let mut inertia = f64::INFINITY;
    let mut history = Vec::new();
    let mut iterations = 0usize;

    for _ in 0..max_iters {
        // Assignment against a read-only centroid snapshot.
        let new_assignment: Vec<usize> = features
            .par_iter()
            .map(|f| nearest(f, &centroids).0)
            .collect();
        let changed = new_assignment != assignment;
        let mut counts = vec![0usize; m];
        for &a in &new_assignment {
            counts[a] += 1;
        }
        let mut work_assignment = new_assignment;
        let mut work_centroids = centroids.clone();

        // Re-seed empty clusters from the globally farthest feature (among
        // clusters that can spare one), lowest feature index on ties.
        loop {
            let empty = match (0..m).find(|&c| counts[c] == 0) {
                Some(c) => c,
                None => break,
            };
            let mut far_idx = usize::MAX;
            let mut far_d = -1.0;
            for (i, f) in features.iter().enumerate() {
                if counts[work_assignment[i]] > 1 {
                    let d = dist_sq(f, &work_centroids[work_assignment[i]]);
                    if d > far_d {
                        far_d = d;
                        far_idx = i;
                    }
                }
            }
            if far_idx == usize::MAX {
                break;
            }
            counts[work_assignment[far_idx]] -= 1;
            work_assignment[far_idx] = empty;
            counts[empty] = 1;
            work_centroids[empty] = features[far_idx].clone();
        }

        // Means update.
        let d = features[0].len();
        let mut sums = vec![vec![0.0; d]; m];
        for (f, &a) in features.iter().zip(&work_assignment) {
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                work_centroids[c] = std::mem::take(&mut sums[c]);
            }
        }

        let new_inertia: f64 = features
            .iter()
            .zip(&work_assignment)
            .map(|(f, &a)| dist_sq(f, &work_centroids[a]))
            .sum();
        // Exact monotonicity holds in real arithmetic; an increase can only
        // be rounding noise at convergence, so stop without applying it.
        if new_inertia > inertia {
            break;
        }
        centroids = work_centroids;
        assignment = work_assignment;
        inertia = new_inertia;
        history.push(new_inertia);
        iterations += 1;
        if !changed {
            break;
        }
    }

    (
        CentroidSet {
            centroids,
            m,
            iteration_count: iterations,
            inertia,
            inertia_history: history,
        },
        assignment,
    )
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.iter().enumerate() {
        let d = dist_sq(f, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn plus_plus_seed(features: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(m);
    centroids.push(features[rng.gen_range(0..features.len())].clone());
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| dist_sq(f, &centroids[0]))
        .collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining features coincide with a centroid.
            rng.gen_range(0..features.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = features.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(features[next].clone());
        for (i, f) in features.iter().enumerate() {
            let d = dist_sq(f, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Grouped input to the clustering passes: one entry per keypoint.
#[derive(Debug, Clone)]
pub struct FeatureItem {
    /// Sample id plus a side marker (0 = original raster, 1 = flipped), so
    /// both sides of one image dedupe independently.
    pub image_key: (usize, u8),
    pub keypoint_index: usize,
    pub position: Point2,
    pub descriptor: Vec<f64>,
}

/// For each (image, cluster) group keeps exactly the member closest to the
/// centroid (ties to the lower keypoint index); returns surviving item
/// indices in input order.
pub fn dedupe_per_image(
    items: &[FeatureItem],
    assignment: &[usize],
    centroids: &CentroidSet,
) -> Vec<usize> {
    let mut best: BTreeMap<((usize, u8), usize), (f64, usize)> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let cluster = assignment[i];
        let d = dist_sq(&item.descriptor, &centroids.centroids[cluster]);
        let entry = best
            .entry((item.image_key, cluster))
            .or_insert((f64::INFINITY, usize::MAX));
        if entry.1 == usize::MAX
            || d < entry.0
            || (d == entry.0 && item.keypoint_index < items[entry.1].keypoint_index)
        {
            *entry = (d, i);
        }
    }
    let mut keep: Vec<usize> = best.values().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    keep
}

/// Output of a clustering pass over (possibly two-sided) corpus features.
#[derive(Debug, Clone)]
pub struct ClusteringOutcome {
    pub centroids: CentroidSet,
    /// (item index, label) for every surviving keypoint.
    pub labels: Vec<(usize, usize)>,
}

/// The modified K-means executed twice: pass 1 with M = K caps every image
/// at K points (its labels are discarded), pass 2 with M clusters on the
/// survivors produces the labels.
pub fn two_pass_clustering(
    items: &[FeatureItem],
    k: usize,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusteringOutcome> {
    if k == 0 || m < k {
        return Err(Error::Config(format!("need M >= K >= 1, got K={k} M={m}")));
    }
    let features: Vec<Vec<f64>> = items.iter().map(|i| i.descriptor.clone()).collect();
    let (cents1, assign1) = kmeans(
        &features,
        k,
        crate::rng::derive_seed(seed, "pass1", 0),
        max_iters,
    )?;
    let survivors = dedupe_per_image(items, &assign1, &cents1);

    if survivors.len() < m {
        return Err(Error::NotEnoughFeatures {
            needed: m,
            available: survivors.len(),
            context: format!(
                "pass-2 clustering: only {} keypoints survive the K-filter; use a smaller M",
                survivors.len()
            ),
        });
    }
    let surv_features: Vec<Vec<f64>> = survivors
        .iter()
        .map(|&i| items[i].descriptor.clone())
        .collect();
    let (cents2, assign2) = kmeans(
        &surv_features,
        m,
        crate::rng::derive_seed(seed, "pass2", 0),
        max_iters,
    )?;
    let surv_items: Vec<FeatureItem> = survivors.iter().map(|&i| items[i].clone()).collect();
    let kept = dedupe_per_image(&surv_items, &assign2, &cents2);
    let labels = kept
        .into_iter()
        .map(|local| (survivors[local], assign2[local]))
        .collect();
    Ok(ClusteringOutcome {
        centroids: cents2,
        labels,
    })
}

fn build_label_set(
    items: &[FeatureItem],
    outcome: &ClusteringOutcome,
    side: u8,
    round: usize,
    m: usize,
) -> PseudoLabelSet {
    let mut per_image: BTreeMap<usize, Vec<LabeledPoint>> = BTreeMap::new();
    for &(idx, label) in &outcome.labels {
        let item = &items[idx];
        if item.image_key.1 != side {
            continue;
        }
        per_image
            .entry(item.image_key.0)
            .or_default()
            .push(LabeledPoint {
                position: item.position,
                cluster_label: label,
                descriptor: item.descriptor.clone(),
                keypoint_index: item.keypoint_index,
            });
    }
    PseudoLabelSet {
        round,
        per_image,
        m,
    }
}

/// Correspondence recovery over single-sided corpus features.
pub fn recover_correspondence(
    items: &[FeatureItem],
    k: usize,
    m: usize,
    seed: u64,
    max_iters: usize,
    round: usize,
) -> Result<(PseudoLabelSet, CentroidSet)> {
    let outcome = two_pass_clustering(items, k, m, seed, max_iters)?;
    let set = build_label_set(items, &outcome, 0, round, m);
    set.validate(k)?;
    Ok((set, outcome.centroids))
}

/// Flip-aware labelling: a single shared clustering over the union of
/// original-side and flipped-side features, deduped per side, yielding one
/// label set per side referencing the same centroids.
pub fn flip_labels(
    original: &[FeatureItem],
    flipped: &[FeatureItem],
    k: usize,
    m: usize,
    seed: u64,
    max_iters: usize,
    round: usize,
) -> Result<(PseudoLabelSet, PseudoLabelSet, CentroidSet)> {
    let mut union = Vec::with_capacity(original.len() + flipped.len());
    union.extend(original.iter().cloned());
    union.extend(flipped.iter().cloned());
    let outcome = two_pass_clustering(&union, k, m, seed, max_iters)?;
    let set0 = build_label_set(&union, &outcome, 0, round, m);
    let set1 = build_label_set(&union, &outcome, 1, round, m);
    set0.validate(k)?;
    set1.validate(k)?;
    Ok((set0, set1, outcome.centroids))
}

/// Permutation over clusters mapping original-side labels to flipped-side
/// labels, with per-cluster co-occurrence counts; clusters that never
/// co-occur are flagged low-confidence and map to themselves where possible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryMap {
    pub perm: Vec<usize>,
    pub counts: Vec<u64>,
    pub low_confidence: Vec<bool>,
}

impl SymmetryMap {
    pub fn identity(m: usize) -> Self {
        Self {
            perm: (0..m).collect(),
            counts: vec![0; m],
            low_confidence: vec![true; m],
        }
    }

    pub fn total_co_occurrence(&self, co: &[Vec<u64>]) -> u64 {
        self.perm.iter().enumerate().map(|(i, &j)| co[i][j]).sum()
    }
}

/// Builds the M×M co-occurrence matrix between original and flipped labels
/// of the same physical keypoints (matched by keypoint index per image).
pub fn co_occurrence(original: &PseudoLabelSet, flipped: &PseudoLabelSet) -> Vec<Vec<u64>> {
    let m = original.m;
    let mut co = vec![vec![0u64; m]; m];
    for (sample_id, orig_points) in &original.per_image {
        if let Some(flip_points) = flipped.per_image.get(sample_id) {
            let flip_by_kp: BTreeMap<usize, usize> = flip_points
                .iter()
                .map(|p| (p.keypoint_index, p.cluster_label))
                .collect();
            for p in orig_points {
                if let Some(&fl) = flip_by_kp.get(&p.keypoint_index) {
                    co[p.cluster_label][fl] += 1;
                }
            }
        }
    }
    co
}

/// Optimal assignment maximizing total original↔flipped co-occurrence.
pub fn cluster_symmetry_map(
    original: &PseudoLabelSet,
    flipped: &PseudoLabelSet,
) -> Result<SymmetryMap> {
    if original.m != flipped.m {
        return Err(Error::Config("label sets disagree on M".into()));
    }
    let m = original.m;
    let co = co_occurrence(original, flipped);
    let cost: Vec<Vec<f64>> = co
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    let mut perm = assignment.row_to_col;
    let counts: Vec<u64> = perm.iter().enumerate().map(|(i, &j)| co[i][j]).collect();
    let low_confidence: Vec<bool> = counts.iter().map(|&c| c == 0).collect();

    // Remap the zero-co-occurrence entries among their own targets,
    // preferring fixed points; optimality is unaffected because all such
    // edges carry zero weight.
    let zero_sources: Vec<usize> = (0..m).filter(|&i| low_confidence[i]).collect();
    let mut free_targets: Vec<usize> = zero_sources.iter().map(|&i| perm[i]).collect();
    for &i in &zero_sources {
        if let Some(pos) = free_targets.iter().position(|&t| t == i) {
            perm[i] = i;
            free_targets.remove(pos);
        } else {
            perm[i] = usize::MAX; // assigned below
        }
    }
    free_targets.sort_unstable();
    let mut ft = free_targets.into_iter();
    for &i in &zero_sources {
        if perm[i] == usize::MAX {
            perm[i] = ft.next().expect("target count matches source count");
        }
    }

    Ok(SymmetryMap {
        perm,
        counts,
        low_confidence,
    })
}

/// Final clustering with exactly K clusters; labels become the landmark
/// indices used by Stage 2.
pub fn final_k_clustering(
    items: &[FeatureItem],
    k: usize,
    seed: u64,
    max_iters: usize,
    round: usize,
) -> Result<(PseudoLabelSet, CentroidSet)> {
    let features: Vec<Vec<f64>> = items.iter().map(|i| i.descriptor.clone()).collect();
    let (cents, assign) = kmeans(
        &features,
        k,
        crate::rng::derive_seed(seed, "final_k", 0),
        max_iters,
    )?;
    let kept = dedupe_per_image(items, &assign, &cents);
    let labels: Vec<(usize, usize)> = kept.into_iter().map(|i| (i, assign[i])).collect();
    let outcome = ClusteringOutcome {
        centroids: cents,
        labels,
    };
    let set = build_label_set(items, &outcome, 0, round, k);
    set.validate(k)?;
    Ok((set, outcome.centroids))
}

/// Final K clustering over both sides jointly (for flip-aware Stage 2).
pub fn final_k_clustering_flip(
    original: &[FeatureItem],
    flipped: &[FeatureItem],
    k: usize,
    seed: u64,
    max_iters: usize,
    round: usize,
) -> Result<(PseudoLabelSet, PseudoLabelSet, CentroidSet)> {
    let mut union = Vec::with_capacity(original.len() + flipped.len());
    union.extend(original.iter().cloned());
    union.extend(flipped.iter().cloned());
    let features: Vec<Vec<f64>> = union.iter().map(|i| i.descriptor.clone()).collect();
    let (cents, assign) = kmeans(
        &features,
        k,
        crate::rng::derive_seed(seed, "final_k", 0),
        max_iters,
    )?;
    let kept = dedupe_per_image(&union, &assign, &cents);
    let labels: Vec<(usize, usize)> = kept.into_iter().map(|i| (i, assign[i])).collect();
    let outcome = ClusteringOutcome {
        centroids: cents,
        labels,
    };
    let set0 = build_label_set(&union, &outcome, 0, round, k);
    let set1 = build_label_set(&union, &outcome, 1, round, k);
    set0.validate(k)?;
    set1.validate(k)?;
    Ok((set0, set1, outcome.centroids))
}

/// Assigns new features to existing centroids with per-image dedupe (used to
/// label held-out images against the training clustering).
pub fn assign_to_centroids(
    items: &[FeatureItem],
    centroids: &CentroidSet,
    round: usize,
) -> PseudoLabelSet {
    let assignment: Vec<usize> = items
        .iter()
        .map(|i| nearest(&i.descriptor, &centroids.centroids).0)
        .collect();
    let kept = dedupe_per_image(items, &assignment, centroids);
    let labels = kept.into_iter().map(|i| (i, assignment[i])).collect();
    let outcome = ClusteringOutcome {
        centroids: centroids.clone(),
        labels,
    };
    build_label_set(items, &outcome, 0, round, centroids.m)
}

// ---------------------------------------------------------------------------
// Label persistence: JSON lines, one record per image per round.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireLabelPoint {
    x: f64,
    y: f64,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct WireLabelRecord {
    sample_id: usize,
    round: usize,
    points: Vec<WireLabelPoint>,
}

/// Writes a pseudo-label set as JSON lines (descriptors are omitted on disk;
/// they are recomputed from checkpoints).
pub fn write_labels(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (&sample_id, points) in &set.per_image {
        let rec = WireLabelRecord {
            sample_id,
            round: set.round,
            points: points
                .iter()
                .map(|p| WireLabelPoint {
                    x: p.position.x,
                    y: p.position.y,
                    label: p.cluster_label,
                })
                .collect(),
        };
        let line =
            serde_json::to_string(&rec).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_labels(path: &Path, m: usize) -> Result<PseudoLabelSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut set = PseudoLabelSet {
        round: 0,
        per_image: BTreeMap::new(),
        m,
    };
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WireLabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
        set.round = rec.round;
        set.per_image.insert(
            rec.sample_id,
            rec.points
                .iter()
                .enumerate()
                .map(|(i, p)| LabeledPoint {
                    position: Point2::new(p.x, p.y),
                    cluster_label: p.label,
                    descriptor: Vec::new(),
                    keypoint_index: i,
                })
                .collect(),
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(image: usize, kp: usize, desc: Vec<f64>) -> FeatureItem {
        FeatureItem {
            image_key: (image, 0),
            keypoint_index: kp,
            position: Point2::new(kp as f64, image as f64),
            descriptor: desc,
        }
    }

    #[test]
    fn kmeans_m1_centroid_is_mean() {
        let features = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0]];
        let (cents, assign) = kmeans(&features, 1, 0, 50).unwrap();
        assert!((cents.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((cents.centroids[0][1] - 2.0).abs() < 1e-12);
        assert!(assign.iter().all(|&a| a == 0));
        let expect: f64 = features
            .iter()
            .map(|f| dist_sq(f, &cents.centroids[0]))
            .sum();
        assert!((cents.inertia - expect).abs() < 1e-12);
    }

    #[test]
    fn kmeans_two_blobs_match_exhaustive_partition() {
        let mut rng = rng_for(3, "blobs", 0);
        let mut features = Vec::new();
        for _ in 0..6 {
            features.push(vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
        }
        for _ in 0..6 {
            features.push(vec![
                5.0 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ]);
        }
        let (cents, assign) = kmeans(&features, 2, 1, 100).unwrap();
        let first = assign[0];
        assert!(assign[..6].iter().all(|&a| a == first));
        assert!(assign[6..].iter().all(|&a| a != first));

        // Exhaustive 2-partition oracle.
        let n = features.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let (mut c0, mut c1) = (vec![0.0; 2], vec![0.0; 2]);
            let (mut n0, mut n1) = (0.0, 0.0);
            for i in 0..n {
                if mask & (1 << i) != 0 {
                    c0[0] += features[i][0];
                    c0[1] += features[i][1];
                    n0 += 1.0;
                } else {
                    c1[0] += features[i][0];
                    c1[1] += features[i][1];
                    n1 += 1.0;
                }
            }
            c0.iter_mut().for_each(|v| *v /= n0);
            c1.iter_mut().for_each(|v| *v /= n1);
            let mut inertia = 0.0;
            for i in 0..n {
                let c = if mask & (1 << i) != 0 { &c0 } else { &c1 };
                inertia += dist_sq(&features[i], c);
            }
            best = best.min(inertia);
        }
        assert!((cents.inertia - best).abs() < 1e-9);
    }

    #[test]
    fn kmeans_distinct_points_zero_inertia() {
        let features = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let (cents, _) = kmeans(&features, 3, 7, 50).unwrap();
        assert!(cents.inertia < 1e-18);
    }

    #[test]
    fn kmeans_inertia_history_non_increasing() {
        let mut rng = rng_for(11, "hist", 0);
        let features: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (cents, _) = kmeans(&features, 10, 5, 100).unwrap();
        for w in cents.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "inertia increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_rejects_too_few_features() {
        let features = vec![vec![0.0, 0.0]];
        assert!(kmeans(&features, 2, 0, 10).is_err());
    }

    #[test]
    fn kmeans_handles_empty_cluster_reseed() {
        // Many duplicated points force empty clusters during seeding.
        let mut features = vec![vec![0.0, 0.0]; 20];
        features.push(vec![10.0, 10.0]);
        features.push(vec![10.1, 10.0]);
        let (cents, assign) = kmeans(&features, 3, 2, 50).unwrap();
        let mut counts = vec![0; 3];
        for &a in &assign {
            counts[a] += 1;
        }
        assert!(
            counts.iter().all(|&c| c > 0),
            "empty cluster survived: {counts:?}"
        );
        assert!(cents.inertia.is_finite());
    }

    #[test]
    fn dedupe_keeps_nearest_to_centroid() {
        let items = vec![
            item(0, 0, vec![0.9, 0.0]),
            item(0, 1, vec![1.0, 0.1]),
            item(0, 2, vec![0.0, 1.0]),
        ];
        let centroids = CentroidSet {
            centroids: vec![vec![1.0, 0.05], vec![0.0, 1.0]],
            m: 2,
            iteration_count: 0,
            inertia: 0.0,
            inertia_history: vec![],
        };
        let keep = dedupe_per_image(&items, &[0, 0, 1], &centroids);
        assert_eq!(keep, vec![1, 2]);
    }

    #[test]
    fn dedupe_is_identity_when_labels_distinct() {
        let items = vec![item(0, 0, vec![1.0, 0.0]), item(0, 1, vec![0.0, 1.0])];
        let centroids = CentroidSet {
            centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            m: 2,
            iteration_count: 0,
            inertia: 0.0,
            inertia_history: vec![],
        };
        let keep = dedupe_per_image(&items, &[0, 1], &centroids);
        assert_eq!(keep, vec![0, 1]);
    }

    #[test]
    fn dedupe_matches_brute_force_group_by_min() {
        let mut rng = rng_for(21, "dedupe", 0);
        let items: Vec<FeatureItem> = (0..60)
            .map(|i| {
                item(
                    i % 5,
                    i,
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let centroids = CentroidSet {
            centroids: (0..4)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
            m: 4,
            iteration_count: 0,
            inertia: 0.0,
            inertia_history: vec![],
        };
        let assignment: Vec<usize> = items
            .iter()
            .map(|i| nearest(&i.descriptor, &centroids.centroids).0)
            .collect();
        let keep = dedupe_per_image(&items, &assignment, &centroids);

        // Brute-force group-by minimum.
        let mut expect: Vec<usize> = Vec::new();
        for img in 0..5usize {
            for c in 0..4usize {
                let group: Vec<usize> = (0..items.len())
                    .filter(|&i| items[i].image_key.0 == img && assignment[i] == c)
                    .collect();
                if let Some(&best) = group.iter().min_by(|&&a, &&b| {
                    dist_sq(&items[a].descriptor, &centroids.centroids[c])
                        .partial_cmp(&dist_sq(&items[b].descriptor, &centroids.centroids[c]))
                        .unwrap()
                        .then(items[a].keypoint_index.cmp(&items[b].keypoint_index))
                }) {
                    expect.push(best);
                }
            }
        }
        expect.sort_unstable();
        assert_eq!(keep, expect);
    }

    /// Synthetic corpus of well-separated descriptor prototypes: each image
    /// gets one noisy copy of each of the K prototypes.
    fn separable_items(n_images: usize, k: usize, noise: f64, seed: u64) -> Vec<FeatureItem> {
        let mut rng = rng_for(seed, "separable", 0);
        let d = 8;
        let protos: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i % d] = 1.0;
                v[(i + 3) % d] = if i % 2 == 0 { 0.7 } else { -0.7 };
                v
            })
            .collect();
        let mut items = Vec::new();
        for img in 0..n_images {
            for (pi, proto) in protos.iter().enumerate() {
                let desc: Vec<f64> = proto
                    .iter()
                    .map(|&v| v + rng.gen_range(-noise..noise))
                    .collect();
                items.push(FeatureItem {
                    image_key: (img, 0),
                    keypoint_index: pi,
                    position: Point2::new(pi as f64, 0.0),
                    descriptor: desc,
                });
            }
        }
        items
    }

    #[test]
    fn recover_correspondence_keeps_all_separable_points() {
        let k = 5;
        let items = separable_items(12, k, 0.02, 31);
        let (set, _) = recover_correspondence(&items, k, k, 9, 100, 0).unwrap();
        set.validate(k).unwrap();
        for pts in set.per_image.values() {
            assert_eq!(pts.len(), k);
        }
    }

    #[test]
    fn near_duplicate_pairs_collapse_in_pass_one() {
        // Each image holds 2K points: K prototypes twice with tiny noise.
        let k = 4;
        let mut items = separable_items(10, k, 0.01, 33);
        let dup: Vec<FeatureItem> = items
            .iter()
            .map(|i| FeatureItem {
                keypoint_index: i.keypoint_index + 100,
                descriptor: i.descriptor.iter().map(|v| v + 0.005).collect(),
                ..i.clone()
            })
            .collect();
        items.extend(dup);
        let (set, _) = recover_correspondence(&items, k, k, 13, 100, 0).unwrap();
        for pts in set.per_image.values() {
            assert_eq!(pts.len(), k, "duplicates must collapse to K per image");
        }
    }

    #[test]
    fn k1_m1_keeps_single_point_nearest_global_centroid() {
        let items = vec![
            item(0, 0, vec![1.0, 0.0]),
            item(0, 1, vec![0.8, 0.1]),
            item(1, 0, vec![0.9, 0.0]),
        ];
        let (set, cents) = recover_correspondence(&items, 1, 1, 5, 50, 0).unwrap();
        for pts in set.per_image.values() {
            assert_eq!(pts.len(), 1);
            assert_eq!(pts[0].cluster_label, 0);
        }
        assert_eq!(cents.m, 1);
    }

    #[test]
    fn pass2_error_instructs_smaller_m() {
        let items = separable_items(3, 2, 0.01, 40); // 6 survivors at most
        let err = recover_correspondence(&items, 2, 50, 1, 50, 0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("smaller M"), "got: {msg}");
    }

    #[test]
    fn symmetry_map_recovers_known_permutation() {
        let m = 5;
        let perm = [2usize, 0, 1, 4, 3];
        let mut orig = PseudoLabelSet {
            round: 0,
            per_image: BTreeMap::new(),
            m,
        };
        let mut flip = orig.clone();
        for img in 0..20usize {
            let mut po = Vec::new();
            let mut pf = Vec::new();
            for kp in 0..m {
                let label = (kp + img) % m;
                po.push(LabeledPoint {
                    position: Point2::new(kp as f64, 0.0),
                    cluster_label: label,
                    descriptor: vec![],
                    keypoint_index: kp,
                });
                pf.push(LabeledPoint {
                    position: Point2::new(kp as f64, 0.0),
                    cluster_label: perm[label],
                    descriptor: vec![],
                    keypoint_index: kp,
                });
            }
            orig.per_image.insert(img, po);
            flip.per_image.insert(img, pf);
        }
        let map = cluster_symmetry_map(&orig, &flip).unwrap();
        assert_eq!(map.perm, perm.to_vec());
        assert!(map.low_confidence.iter().all(|&l| !l));
    }

    #[test]
    fn symmetry_map_diagonal_dominant_is_identity() {
        let m = 4;
        let mut orig = PseudoLabelSet {
            round: 0,
            per_image: BTreeMap::new(),
            m,
        };
        let mut flip = orig.clone();
        for img in 0..10usize {
            let pts: Vec<LabeledPoint> = (0..m)
                .map(|kp| LabeledPoint {
                    position: Point2::new(kp as f64, 0.0),
                    cluster_label: (kp + img) % m,
                    descriptor: vec![],
                    keypoint_index: kp,
                })
                .collect();
            orig.per_image.insert(img, pts.clone());
            flip.per_image.insert(img, pts);
        }
        let map = cluster_symmetry_map(&orig, &flip).unwrap();
        assert_eq!(map.perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn symmetry_map_beats_identity_co_occurrence() {
        let m = 6;
        let mut rng = rng_for(55, "symrand", 0);
        let mut orig = PseudoLabelSet {
            round: 0,
            per_image: BTreeMap::new(),
            m,
        };
        let mut flip = orig.clone();
        for img in 0..30usize {
            let mut po = Vec::new();
            let mut pf = Vec::new();
            let mut labels: Vec<usize> = (0..m).collect();
            for i in 0..m {
                let j = rng.gen_range(i..m);
                labels.swap(i, j);
            }
            for kp in 0..4 {
                po.push(LabeledPoint {
                    position: Point2::new(kp as f64, 0.0),
                    cluster_label: labels[kp],
                    descriptor: vec![],
                    keypoint_index: kp,
                });
                pf.push(LabeledPoint {
                    position: Point2::new(kp as f64, 0.0),
                    cluster_label: labels[(kp + 1) % m],
                    descriptor: vec![],
                    keypoint_index: kp,
                });
            }
            orig.per_image.insert(img, po);
            flip.per_image.insert(img, pf);
        }
        let co = co_occurrence(&orig, &flip);
        let map = cluster_symmetry_map(&orig, &flip).unwrap();
        let identity = SymmetryMap::identity(m);
        assert!(map.total_co_occurrence(&co) >= identity.total_co_occurrence(&co));
    }

    #[test]
    fn final_k_clustering_blob_pure() {
        let k = 4;
        let items = separable_items(10, k, 0.02, 61);
        let (set, _) = final_k_clustering(&items, k, 3, 100, 0).unwrap();
        // Purity: points with the same keypoint index share a label.
        let mut label_of: BTreeMap<usize, usize> = BTreeMap::new();
        for pts in set.per_image.values() {
            for p in pts {
                let e = label_of.entry(p.keypoint_index).or_insert(p.cluster_label);
                assert_eq!(
                    *e, p.cluster_label,
                    "impure cluster for kp {}",
                    p.keypoint_index
                );
            }
        }
    }

    #[test]
    fn final_k1_labels_everything_zero() {
        let items = separable_items(4, 3, 0.05, 62);
        let (set, _) = final_k_clustering(&items, 1, 4, 50, 0).unwrap();
        for pts in set.per_image.values() {
            assert!(pts.iter().all(|p| p.cluster_label == 0));
        }
    }

    #[test]
    fn clustering_deterministic_across_runs() {
        let items = separable_items(8, 4, 0.1, 63);
        let (a, ca) = recover_correspondence(&items, 4, 6, 17, 100, 0).unwrap();
        let (b, cb) = recover_correspondence(&items, 4, 6, 17, 100, 0).unwrap();
        assert_eq!(ca.inertia, cb.inertia);
        for (pa, pb) in a.per_image.values().zip(b.per_image.values()) {
            let la: Vec<usize> = pa.iter().map(|p| p.cluster_label).collect();
            let lb: Vec<usize> = pb.iter().map(|p| p.cluster_label).collect();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn two_sided_disjoint_supports_cluster_independently() {
        // Disjoint descriptor supports per side: the shared clustering's
        // inertia equals the sum of two independent clusterings' inertias.
        let k = 3;
        let orig = separable_items(8, k, 0.05, 71);
        let mut flip = separable_items(8, k, 0.05, 72);
        for it in &mut flip {
            it.image_key.1 = 1;
            // Shift to a disjoint region of descriptor space.
            for v in &mut it.descriptor {
                *v += 10.0;
            }
        }
        let (s0, s1, cents) = flip_labels(&orig, &flip, k, 2 * k, 5, 100, 0).unwrap();
        assert_eq!(cents.m, 2 * k);
        // Each side must use a disjoint set of labels.
        let labels0: std::collections::BTreeSet<usize> = s0
            .per_image
            .values()
            .flatten()
            .map(|p| p.cluster_label)
            .collect();
        let labels1: std::collections::BTreeSet<usize> = s1
            .per_image
            .values()
            .flatten()
            .map(|p| p.cluster_label)
            .collect();
        assert!(labels0.is_disjoint(&labels1));
    }

    #[test]
    fn labels_file_roundtrip() {
        let items = separable_items(5, 3, 0.05, 64);
        let (set, _) = recover_correspondence(&items, 3, 3, 2, 50, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        write_labels(&path, &set).unwrap();
        let back = read_labels(&path, set.m).unwrap();
        assert_eq!(back.round, 7);
        assert_eq!(back.per_image.len(), set.per_image.len());
        for (a, b) in back.per_image.values().zip(set.per_image.values()) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.cluster_label, y.cluster_label);
                assert!((x.position.x - y.position.x).abs() < 1e-12);
            }
        }
    }
}
