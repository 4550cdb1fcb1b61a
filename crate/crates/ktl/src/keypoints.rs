//! Initial unindexed keypoint sets: synthetic noise-mixture initialization,
//! adaptive non-maximal suppression, corpus-level outlier removal, and the
//! interchange file for external detector outputs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{raster_to_grid, Point2};
use crate::rng::rng_for;
use crate::synth::ImageSample;

/// A salient image location on the output grid; descriptor and cluster label
/// are filled in by later pipeline steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Position in output-grid pixel coordinates.
    pub position: Point2,
    pub confidence: f64,
    pub descriptor: Option<Vec<f64>>,
    pub cluster_label: Option<usize>,
}

impl Keypoint {
    pub fn at(position: Point2, confidence: f64) -> Self {
        Self {
            position,
            confidence,
            descriptor: None,
            cluster_label: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    SyntheticMixture,
    ExternalFile,
    Detector,
}

#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub sample_id: usize,
    pub points: Vec<Keypoint>,
    pub source: KeypointSource,
}

/// Populates one image with a mixture of jittered ground-truth landmarks and
/// uniform random points. `round(real_ratio · n_points)` points are real; the
/// rest are uniform over the output grid. Jitter is uniform per axis in
/// [−jitter_px, +jitter_px] (output-grid pixels). Real points get confidence
/// 1.0, random points 0.5.
pub fn init_mixture(
    sample: &ImageSample,
    grid_w: usize,
    grid_h: usize,
    stride: usize,
    n_points: usize,
    real_ratio: f64,
    jitter_px: f64,
    seed: u64,
) -> Result<KeypointSet> {
    if !(0.0..=1.0).contains(&real_ratio) {
        return Err(Error::Config("real_ratio must be in [0,1]".into()));
    }
    if n_points == 0 {
        return Err(Error::Config("n_points must be >= 1".into()));
    }
    let n_real = (real_ratio * n_points as f64).round() as usize;
    let visible: Vec<Point2> = sample
        .gt_landmarks
        .iter()
        .zip(&sample.gt_visible)
        .filter(|(_, &v)| v)
        .map(|(p, _)| raster_to_grid(*p, stride))
        .collect();
    if n_real > visible.len() {
        return Err(Error::Config(format!(
            "requested {n_real} real points but only {} visible landmarks (sampling with replacement disallowed)",
            visible.len()
        )));
    }

    let mut rng = rng_for(seed, "init_mixture", sample.sample_id as u64);
    // Random subset of landmarks, without replacement.
    let mut indices: Vec<usize> = (0..visible.len()).collect();
    for i in 0..indices.len() {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let max_x = grid_w as f64 - 1.0;
    let max_y = grid_h as f64 - 1.0;
    let mut points = Vec::with_capacity(n_points);
    for &idx in indices.iter().take(n_real) {
        let base = visible[idx];
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, j: f64| {
            if j > 0.0 {
                rng.gen_range(-j..=j)
            } else {
                0.0
            }
        };
        let p = Point2::new(
            (base.x + jitter(&mut rng, jitter_px)).clamp(0.0, max_x),
            (base.y + jitter(&mut rng, jitter_px)).clamp(0.0, max_y),
        );
        points.push(Keypoint::at(p, 1.0));
    }
    for _ in n_real..n_points {
        let p = Point2::new(rng.gen_range(0.0..max_x), rng.gen_range(0.0..max_y));
        points.push(Keypoint::at(p, 0.5));
    }
    Ok(KeypointSet {
        sample_id: sample.sample_id,
        points,
        source: KeypointSource::SyntheticMixture,
    })
}

/// Adaptive non-maximal suppression. Each point's suppression radius is its
/// distance to the nearest point of strictly higher priority, where priority
/// orders by confidence descending then (y, x) ascending. The `n_target`
/// points with the largest radii are kept, so the result is independent of
/// input ordering.
pub fn anms_filter(set: &KeypointSet, n_target: usize) -> KeypointSet {
    if set.points.len() <= n_target {
        return set.clone();
    }
    let radii = anms_radii(&set.points);
    let mut order: Vec<usize> = (0..set.points.len()).collect();
    order.sort_by(|&a, &b| {
        radii[b]
            .partial_cmp(&radii[a])
            .unwrap()
            .then(priority_key(&set.points[a]).partial_cmp(&priority_key(&set.points[b])).unwrap())
    });
    let mut keep: Vec<usize> = order.into_iter().take(n_target).collect();
    keep.sort_unstable();
    KeypointSet {
        sample_id: set.sample_id,
        points: keep.into_iter().map(|i| set.points[i].clone()).collect(),
        source: set.source,
    }
}

fn priority_key(k: &Keypoint) -> (f64, f64, f64) {
    (-k.confidence, k.position.y, k.position.x)
}

/// Suppression radius per point: distance to the nearest strictly
/// higher-priority point; infinity for the top-priority point.
pub fn anms_radii(points: &[Keypoint]) -> Vec<f64> {
    let n = points.len();
    let mut radii = vec![f64::INFINITY; n];
    for i in 0..n {
        let ki = priority_key(&points[i]);
        for j in 0..n {
            if i == j {
                continue;
            }
            if priority_key(&points[j]) < ki {
                radii[i] = radii[i].min(points[i].position.dist(&points[j].position));
            }
        }
    }
    radii
}

/// Drops the fraction of points (corpus-wide) whose mean descriptor distance
/// to their `density_k` nearest neighbours is largest. Per-image order of the
/// survivors is preserved.
pub fn outlier_prefilter(
    sets: &[KeypointSet],
    density_k: usize,
    drop_fraction: f64,
) -> Result<Vec<KeypointSet>> {
    let all: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.points.len()).map(move |pi| (si, pi)))
        .collect();
    let n = all.len();
    if density_k >= n {
        return Err(Error::Config(format!(
            "density_k {density_k} must be smaller than corpus point count {n}"
        )));
    }
    for &(si, pi) in &all {
        if sets[si].points[pi].descriptor.is_none() {
            return Err(Error::Config(format!(
                "point {pi} of sample {} has no descriptor",
                sets[si].sample_id
            )));
        }
    }
    let n_drop = (drop_fraction * n as f64).round() as usize;
    if n_drop == 0 {
        return Ok(sets.to_vec());
    }

    let desc =
        |i: usize| -> &[f64] { sets[all[i].0].points[all[i].1].descriptor.as_deref().unwrap() };
    let mut scores: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| euclid(desc(i), desc(j)))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = dists.iter().take(density_k).sum::<f64>() / density_k as f64;
            (mean, i)
        })
        .collect();
    // Highest mean k-NN distance first; ties keep the earlier corpus index.
    scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let dropped: std::collections::BTreeSet<usize> =
        scores.iter().take(n_drop).map(|&(_, i)| i).collect();

    let mut out: Vec<KeypointSet> = sets
        .iter()
        .map(|s| KeypointSet {
            sample_id: s.sample_id,
            points: Vec::new(),
            source: s.source,
        })
        .collect();
    for (flat, &(si, pi)) in all.iter().enumerate() {
        if !dropped.contains(&flat) {
            out[si].points.push(sets[si].points[pi].clone());
        }
    }
    Ok(out)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Keypoint interchange file: JSON lines, one object per image.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WirePoint {
    x: f64,
    y: f64,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    desc: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    sample_id: usize,
    points: Vec<WirePoint>,
}

/// Reads external detector output. Coordinates are already in output-grid
/// pixels; positions outside [0, grid−1]² are rejected. Descriptors, when
/// present, are L2-normalized on ingest.
pub fn read_keypoint_file(path: &Path, grid_w: usize, grid_h: usize) -> Result<Vec<KeypointSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut by_id: BTreeMap<usize, KeypointSet> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WireRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
        let mut points = Vec::with_capacity(rec.points.len());
        for wp in rec.points {
            if !(0.0..=(grid_w as f64 - 1.0)).contains(&wp.x)
                || !(0.0..=(grid_h as f64 - 1.0)).contains(&wp.y)
            {
                return Err(Error::Config(format!(
                    "keypoint ({}, {}) outside output grid in sample {}",
                    wp.x, wp.y, rec.sample_id
                )));
            }
            let descriptor = match wp.desc {
                Some(d) => Some(normalize(d)?),
                None => None,
            };
            points.push(Keypoint {
                position: Point2::new(wp.x, wp.y),
                confidence: wp.score.clamp(0.0, 1.0),
                descriptor,
                cluster_label: None,
            });
        }
        by_id.insert(
            rec.sample_id,
            KeypointSet {
                sample_id: rec.sample_id,
                points,
                source: KeypointSource::ExternalFile,
            },
        );
    }
    Ok(by_id.into_values().collect())
}

pub fn write_keypoint_file(path: &Path, sets: &[KeypointSet]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for s in sets {
        let rec = WireRecord {
            sample_id: s.sample_id,
            points: s
                .points
                .iter()
                .map(|k| WirePoint {
                    x: k.position.x,
                    y: k.position.y,
                    score: k.confidence,
                    desc: k.descriptor.clone(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Config("zero-norm descriptor in keypoint file".into()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_corpus;

    fn sample() -> (crate::synth::Corpus, usize, usize) {
        let corpus = generate_corpus(2, 1, 64, 0.0, 40).unwrap();
        (corpus, 32, 32)
    }

    #[test]
    fn full_real_ratio_zero_jitter_hits_landmarks_exactly() {
        let (corpus, gw, gh) = sample();
        let s = &corpus.samples[0];
        let set = init_mixture(s, gw, gh, 2, 15, 1.0, 0.0, 3).unwrap();
        assert_eq!(set.points.len(), 15);
        let gt: Vec<Point2> = s
            .gt_landmarks
            .iter()
            .map(|&p| raster_to_grid(p, 2))
            .collect();
        for k in &set.points {
            assert!(gt.iter().any(|g| g.dist(&k.position) < 1e-9));
        }
    }

    #[test]
    fn mixture_counts_are_exact() {
        let (corpus, gw, gh) = sample();
        let set = init_mixture(&corpus.samples[0], gw, gh, 2, 15, 0.2, 3.0, 3).unwrap();
        let real = set.points.iter().filter(|k| k.confidence == 1.0).count();
        let random = set.points.iter().filter(|k| k.confidence == 0.5).count();
        assert_eq!(real, 3);
        assert_eq!(random, 12);
    }

    #[test]
    fn too_many_real_points_is_an_error() {
        let (corpus, gw, gh) = sample();
        assert!(init_mixture(&corpus.samples[0], gw, gh, 2, 16, 1.0, 0.0, 3).is_err());
    }

    #[test]
    fn anms_identity_when_under_target() {
        let (corpus, gw, gh) = sample();
        let set = init_mixture(&corpus.samples[0], gw, gh, 2, 10, 0.5, 1.0, 3).unwrap();
        let out = anms_filter(&set, 10);
        assert_eq!(out.points.len(), 10);
        assert_eq!(out.points, set.points);
    }

    #[test]
    fn anms_square_corners_all_kept() {
        let mk = |x, y| Keypoint::at(Point2::new(x, y), 0.9);
        let set = KeypointSet {
            sample_id: 0,
            points: vec![mk(0.0, 0.0), mk(10.0, 0.0), mk(0.0, 10.0), mk(10.0, 10.0)],
            source: KeypointSource::SyntheticMixture,
        };
        let out = anms_filter(&set, 4);
        assert_eq!(out.points.len(), 4);
    }

    #[test]
    fn anms_matches_brute_force_reference() {
        // Reference: keep the n_target points with largest suppression radius,
        // computed from the full pairwise matrix.
        let mut rng = rng_for(99, "anms_test", 0);
        let points: Vec<Keypoint> = (0..100)
            .map(|_| {
                Keypoint::at(
                    Point2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let set = KeypointSet {
            sample_id: 0,
            points: points.clone(),
            source: KeypointSource::SyntheticMixture,
        };
        let out = anms_filter(&set, 10);

        // O(n²) oracle.
        let mut radii = vec![f64::INFINITY; points.len()];
        for i in 0..points.len() {
            for j in 0..points.len() {
                if i != j && priority_key(&points[j]) < priority_key(&points[i]) {
                    radii[i] = radii[i].min(points[i].position.dist(&points[j].position));
                }
            }
        }
        let mut expect: Vec<usize> = (0..points.len()).collect();
        expect.sort_by(|&a, &b| {
            radii[b]
                .partial_cmp(&radii[a])
                .unwrap()
                .then(priority_key(&points[a]).partial_cmp(&priority_key(&points[b])).unwrap())
        });
        let mut expect: Vec<usize> = expect.into_iter().take(10).collect();
        expect.sort_unstable();
        let got: Vec<Point2> = out.points.iter().map(|k| k.position).collect();
        let want: Vec<Point2> = expect.iter().map(|&i| points[i].position).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn anms_is_input_order_independent() {
        let mut rng = rng_for(5, "anms_perm", 0);
        let points: Vec<Keypoint> = (0..40)
            .map(|_| {
                Keypoint::at(
                    Point2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let set = KeypointSet {
            sample_id: 0,
            points: points.clone(),
            source: KeypointSource::SyntheticMixture,
        };
        let mut reversed = points;
        reversed.reverse();
        let set_rev = KeypointSet {
            sample_id: 0,
            points: reversed,
            source: KeypointSource::SyntheticMixture,
        };
        let a = anms_filter(&set, 12);
        let b = anms_filter(&set_rev, 12);
        let mut pa: Vec<(f64, f64)> = a.points.iter().map(|k| (k.position.x, k.position.y)).collect();
        let mut pb: Vec<(f64, f64)> = b.points.iter().map(|k| (k.position.x, k.position.y)).collect();
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(pa, pb);
    }

    fn set_with_descriptors(descs: Vec<Vec<f64>>) -> KeypointSet {
        KeypointSet {
            sample_id: 0,
            points: descs
                .into_iter()
                .enumerate()
                .map(|(i, d)| Keypoint {
                    position: Point2::new(i as f64, 0.0),
                    confidence: 1.0,
                    descriptor: Some(d),
                    cluster_label: None,
                })
                .collect(),
            source: KeypointSource::ExternalFile,
        }
    }

    #[test]
    fn outlier_prefilter_zero_fraction_is_identity() {
        let sets = vec![set_with_descriptors(vec![vec![1.0, 0.0]; 20])];
        let out = outlier_prefilter(&sets, 5, 0.0).unwrap();
        assert_eq!(out[0].points.len(), 20);
    }

    #[test]
    fn outlier_prefilter_drops_the_far_descriptor() {
        // 50 near-identical descriptors plus one at distance 10.
        let mut rng = rng_for(8, "outlier", 0);
        let mut descs: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![1.0 + rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)])
            .collect();
        descs.push(vec![11.0, 0.0]);
        let sets = vec![set_with_descriptors(descs)];
        let out = outlier_prefilter(&sets, 5, 0.02).unwrap();
        assert_eq!(out[0].points.len(), 50);
        assert!(out[0]
            .points
            .iter()
            .all(|k| k.descriptor.as_ref().unwrap()[0] < 10.0));
    }

    #[test]
    fn outlier_prefilter_exact_drop_count() {
        let mut rng = rng_for(9, "outlier_count", 0);
        let descs: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let sets = vec![set_with_descriptors(descs)];
        let out = outlier_prefilter(&sets, 10, 0.1).unwrap();
        assert_eq!(out[0].points.len(), 180);
    }

    #[test]
    fn outlier_prefilter_never_drops_denser_point_than_kept() {
        let mut rng = rng_for(10, "outlier_prop", 0);
        let descs: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let sets = vec![set_with_descriptors(descs.clone())];
        let out = outlier_prefilter(&sets, 4, 0.2).unwrap();
        let kept: Vec<Vec<f64>> = out[0]
            .points
            .iter()
            .map(|k| k.descriptor.clone().unwrap())
            .collect();
        // Brute-force mean k-NN distance for every original point.
        let knn = |d: &Vec<f64>| {
            let mut ds: Vec<f64> = descs
                .iter()
                .filter(|o| *o != d)
                .map(|o| euclid(d, o))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds.iter().take(4).sum::<f64>() / 4.0
        };
        let max_kept = kept.iter().map(|d| knn(d)).fold(0.0f64, f64::max);
        for d in &descs {
            if !kept.contains(d) {
                assert!(knn(d) >= max_kept - 1e-12);
            }
        }
    }

    #[test]
    fn keypoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.jsonl");
        let sets = vec![set_with_descriptors(vec![
            vec![3.0, 4.0],
            vec![0.0, 2.0],
        ])];
        write_keypoint_file(&path, &sets).unwrap();
        let back = read_keypoint_file(&path, 32, 32).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].points.len(), 2);
        // Normalized on ingest.
        let d = back[0].points[0].descriptor.as_ref().unwrap();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn keypoint_file_rejects_out_of_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.jsonl");
        std::fs::write(
            &path,
            "{\"sample_id\":0,\"points\":[{\"x\":99.0,\"y\":0.0,\"score\":1.0}]}\n",
        )
        .unwrap();
        assert!(read_keypoint_file(&path, 32, 32).is_err());
    }
}
