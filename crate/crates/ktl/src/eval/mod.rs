//! Evaluation protocol: bias-free linear regression between discovered and
//! annotated landmarks, forward/backward NME, CED curves, Hungarian-matched
//! raw-landmark metrics, and SVT completion for Stage-1 gap filling.

pub mod hungarian;
pub mod plot;
pub mod svt;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

pub use hungarian::{hungarian as solve_assignment, Assignment};

/// K landmark rows × N image columns of 2D coordinates with a missing mask.
#[derive(Debug, Clone)]
pub struct LandmarkMatrix {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
}

impl LandmarkMatrix {
    pub fn rows(&self) -> usize {
        self.xs.len()
    }

    pub fn cols(&self) -> usize {
        self.xs.first().map_or(0, |r| r.len())
    }

    /// Column of landmark points for one image; `None` entries are missing.
    pub fn image_points(&self, col: usize) -> Vec<Option<Point2>> {
        (0..self.rows())
            .map(|r| {
                self.observed[r][col].then(|| Point2::new(self.xs[r][col], self.ys[r][col]))
            })
            .collect()
    }
}

/// SVT completion of both coordinate planes; observed entries are returned
/// unchanged. `tau` of `None` uses the default 5·√(K·N).
pub fn svt_complete(
    matrix: &LandmarkMatrix,
    tau: Option<f64>,
    step: f64,
    max_iters: usize,
) -> Result<LandmarkMatrix> {
    let tau = tau.unwrap_or_else(|| svt::default_tau(matrix.rows(), matrix.cols()));
    let xs = svt::svt(&matrix.xs, &matrix.observed, tau, step, max_iters)?;
    let ys = svt::svt(&matrix.ys, &matrix.observed, tau, step, max_iters)?;
    Ok(LandmarkMatrix {
        xs,
        ys,
        observed: vec![vec![true; matrix.cols()]; matrix.rows()],
    })
}

/// Test-time completion: missing entries take the per-landmark mean position
/// computed from a training matrix.
pub fn mean_complete(matrix: &LandmarkMatrix, train: &LandmarkMatrix) -> LandmarkMatrix {
    let mx = svt::observed_row_means(&train.xs, &train.observed);
    let my = svt::observed_row_means(&train.ys, &train.observed);
    LandmarkMatrix {
        xs: svt::mean_fill(&matrix.xs, &matrix.observed, &mx),
        ys: svt::mean_fill(&matrix.ys, &matrix.observed, &my),
        observed: vec![vec![true; matrix.cols()]; matrix.rows()],
    }
}

/// Linear map with no bias from one landmark layout to another, solved by
/// SVD pseudo-inverse with singular value cutoff 1e-10·σ_max.
#[derive(Debug, Clone)]
pub struct Regressor {
    /// (2·K_out) × (2·K_in)
    w: DMatrix<f64>,
}

fn stack(points: &[Vec<Point2>]) -> DMatrix<f64> {
    let n = points.len();
    let k = points[0].len();
    DMatrix::from_fn(n, 2 * k, |i, j| {
        let p = &points[i][j / 2];
        if j % 2 == 0 {
            p.x
        } else {
            p.y
        }
    })
}

pub fn fit_regressor(unsup: &[Vec<Point2>], gt: &[Vec<Point2>]) -> Result<Regressor> {
    if unsup.is_empty() || unsup.len() != gt.len() {
        return Err(Error::Empty("regressor training set".into()));
    }
    let u = stack(unsup); // N × 2Ki
    let g = stack(gt); // N × 2Ko
    // Minimal-norm least squares: Wᵀ = U⁺ · G.
    let svd = u.clone().svd(true, true);
    let wt = svd
        .solve(&g, 1e-10)
        .map_err(|e| Error::Config(format!("regressor solve failed: {e}")))?;
    Ok(Regressor { w: wt.transpose() })
}

impl Regressor {
    pub fn predict(&self, input: &[Point2]) -> Vec<Point2> {
        let x = DMatrix::from_fn(2 * input.len(), 1, |i, _| {
            let p = &input[i / 2];
            if i % 2 == 0 {
                p.x
            } else {
                p.y
            }
        });
        let y = &self.w * x;
        (0..y.nrows() / 2)
            .map(|i| Point2::new(y[(2 * i, 0)], y[(2 * i + 1, 0)]))
            .collect()
    }

    pub fn residual(&self, unsup: &[Vec<Point2>], gt: &[Vec<Point2>]) -> f64 {
        let mut acc = 0.0;
        for (u, g) in unsup.iter().zip(gt) {
            let pred = self.predict(u);
            for (p, q) in pred.iter().zip(g) {
                acc += p.dist_sq(q);
            }
        }
        acc
    }
}

/// Mean Euclidean point error divided by the normalizer, as a percentage.
pub fn nme(predicted: &[Point2], gt: &[Point2], normalizer: f64) -> Result<f64> {
    if predicted.len() != gt.len() {
        return Err(Error::DimMismatch(format!(
            "point counts {} vs {}",
            predicted.len(),
            gt.len()
        )));
    }
    if normalizer <= 0.0 {
        return Err(Error::Config("normalizer must be positive".into()));
    }
    let mean = predicted
        .iter()
        .zip(gt)
        .map(|(p, q)| p.dist(q))
        .sum::<f64>()
        / predicted.len() as f64;
    Ok(100.0 * mean / normalizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormalizerKind {
    /// Distance between two designated gt landmark indices.
    Interocular { a: usize, b: usize },
    /// Square root of the area of the tight gt bounding box.
    BboxSqrtArea,
    /// Fixed constant (for oracle tests).
    Custom { value: f64 },
}

pub fn normalizer_for(kind: &NormalizerKind, gt: &[Point2]) -> Result<f64> {
    let v = match kind {
        NormalizerKind::Interocular { a, b } => {
            if *a >= gt.len() || *b >= gt.len() {
                return Err(Error::Config("interocular indices out of range".into()));
            }
            gt[*a].dist(&gt[*b])
        }
        NormalizerKind::BboxSqrtArea => {
            let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
            let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for p in gt {
                x0 = x0.min(p.x);
                y0 = y0.min(p.y);
                x1 = x1.max(p.x);
                y1 = y1.max(p.y);
            }
            ((x1 - x0) * (y1 - y0)).sqrt()
        }
        NormalizerKind::Custom { value } => *value,
    };
    if v <= 0.0 {
        return Err(Error::Config(format!("degenerate normalizer {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub forward_nme: f64,
    pub backward_nme: f64,
    /// (threshold, cumulative fraction) samples of the forward error CED.
    pub ced: Vec<(f64, f64)>,
    pub per_landmark_accuracy: Vec<f64>,
    pub per_landmark_mean_error: Vec<f64>,
    /// Best unsupervised column for each gt landmark row.
    pub matching: Vec<usize>,
    pub normalizer_kind: NormalizerKind,
    pub points_per_image: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for &(_, f) in &self.ced {
            if !(0.0..=1.0).contains(&f) || f + 1e-12 < prev {
                return Err(Error::Config("CED fractions must be non-decreasing in [0,1]".into()));
            }
            prev = f;
        }
        if let Some(&(_, last)) = self.ced.last() {
            if (last - 1.0).abs() > 1e-12 {
                return Err(Error::Config("CED must reach 1.0".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Accuracy threshold (as a fraction of the per-image normalizer) used for
/// the per-landmark accuracy column.
pub const PER_LANDMARK_ACC_THRESHOLD: f64 = 0.1;

/// Full forward/backward evaluation. `unsup` and `gt` are per-image landmark
/// lists (already completed — no missing points); `train`/`test` are disjoint
/// index sets into them.
pub fn forward_backward_eval(
    unsup: &[Vec<Point2>],
    gt: &[Vec<Point2>],
    train: &[usize],
    test: &[usize],
    normalizer_kind: NormalizerKind,
) -> Result<EvalReport> {
    if train.iter().any(|i| test.contains(i)) {
        return Err(Error::Config("train/test splits overlap".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("train or test split".into()));
    }
    let pick = |idx: &[usize], data: &[Vec<Point2>]| -> Vec<Vec<Point2>> {
        idx.iter().map(|&i| data[i].clone()).collect()
    };
    let (u_train, g_train) = (pick(train, unsup), pick(train, gt));
    let (u_test, g_test) = (pick(test, unsup), pick(test, gt));

    let k_gt = gt[0].len();
    let fwd = fit_regressor(&u_train, &g_train)?;
    let bwd = fit_regressor(&g_train, &u_train)?;

    let mut fwd_errors: Vec<f64> = Vec::new(); // normalized, per point
    let mut per_landmark_err = vec![0.0; k_gt];
    let mut fwd_sum = 0.0;
    let mut bwd_sum = 0.0;
    let mut per_landmark_hits = vec![0usize; k_gt];
    for (u, g) in u_test.iter().zip(&g_test) {
        let norm = normalizer_for(&normalizer_kind, g)?;
        let pred = fwd.predict(u);
        for (j, (p, q)) in pred.iter().zip(g).enumerate() {
            let e = p.dist(q) / norm;
            fwd_errors.push(e);
            per_landmark_err[j] += e;
            if e <= PER_LANDMARK_ACC_THRESHOLD {
                per_landmark_hits[j] += 1;
            }
        }
        fwd_sum += nme(&pred, g, norm)?;
        let back = bwd.predict(g);
        bwd_sum += nme(&back, u, norm)?;
    }
    let n_test = test.len() as f64;
    for e in &mut per_landmark_err {
        *e /= n_test;
    }
    let per_landmark_accuracy: Vec<f64> = per_landmark_hits
        .iter()
        .map(|&h| h as f64 / n_test)
        .collect();

    fwd_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = fwd_errors.len();
    let ced: Vec<(f64, f64)> = fwd_errors
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, (i + 1) as f64 / m as f64))
        .collect();

    // Match each gt landmark to its closest unsupervised landmark (mean
    // distance over the train split), padding to square when counts differ.
    let k_un = unsup[0].len();
    let side = k_gt.max(k_un);
    let big = 1e6;
    let cost: Vec<Vec<f64>> = (0..side)
        .map(|r| {
            (0..side)
                .map(|c| {
                    if r >= k_gt || c >= k_un {
                        big
                    } else {
                        let mut acc = 0.0;
                        for (u, g) in u_train.iter().zip(&g_train) {
                            acc += g[r].dist(&u[c]);
                        }
                        acc / u_train.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian::hungarian(&cost)?;
    let matching: Vec<usize> = assignment.row_to_col[..k_gt].to_vec();

    let report = EvalReport {
        forward_nme: fwd_sum / n_test,
        backward_nme: bwd_sum / n_test,
        ced,
        per_landmark_accuracy,
        per_landmark_mean_error: per_landmark_err,
        matching,
        normalizer_kind,
        points_per_image: unsup[0].len() as f64,
    };
    report.validate()?;
    Ok(report)
}

/// Thresholds for raw (unregressed) landmark metrics, in raster pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RawThresholds {
    pub accuracy_px: f64,
    pub precision_px: f64,
    pub pck_px: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMetrics {
    pub per_gt_accuracy: Vec<f64>,
    pub per_gt_pck: Vec<f64>,
    pub precision: f64,
    pub matching: Vec<usize>,
}

/// Quality of raw discovered landmarks: each gt point is matched to its best
/// unsupervised landmark by Hungarian assignment on mean distance over the
/// `match_split`, then accuracy/PCK are measured on the `eval_split`;
/// precision is the fraction of all unsupervised points within reach of any
/// gt point.
pub fn raw_landmark_metrics(
    unsup: &[Vec<Point2>],
    gt: &[Vec<Point2>],
    match_split: &[usize],
    eval_split: &[usize],
    thresholds: RawThresholds,
) -> Result<RawMetrics> {
    if match_split.is_empty() || eval_split.is_empty() {
        return Err(Error::Empty("metric splits".into()));
    }
    let k_gt = gt[0].len();
    let k_un = unsup[0].len();
    let side = k_gt.max(k_un);
    let big = 1e6;
    let cost: Vec<Vec<f64>> = (0..side)
        .map(|r| {
            (0..side)
                .map(|c| {
                    if r >= k_gt || c >= k_un {
                        big
                    } else {
                        let mut acc = 0.0;
                        for &i in match_split {
                            acc += gt[i][r].dist(&unsup[i][c]);
                        }
                        acc / match_split.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    let matching: Vec<usize> = hungarian::hungarian(&cost)?.row_to_col[..k_gt].to_vec();

    let mut per_gt_accuracy = vec![0.0; k_gt];
    let mut per_gt_pck = vec![0.0; k_gt];
    let mut close_count = 0usize;
    let mut total_unsup = 0usize;
    for &i in eval_split {
        for r in 0..k_gt {
            let c = matching[r];
            if c < k_un {
                let d = gt[i][r].dist(&unsup[i][c]);
                if d <= thresholds.accuracy_px {
                    per_gt_accuracy[r] += 1.0;
                }
                if d <= thresholds.pck_px {
                    per_gt_pck[r] += 1.0;
                }
            }
        }
        for p in &unsup[i] {
            total_unsup += 1;
            if gt[i].iter().any(|g| g.dist(p) <= thresholds.precision_px) {
                close_count += 1;
            }
        }
    }
    let n = eval_split.len() as f64;
    for v in per_gt_accuracy.iter_mut().chain(per_gt_pck.iter_mut()) {
        *v = 100.0 * *v / n;
    }
    Ok(RawMetrics {
        per_gt_accuracy,
        per_gt_pck,
        precision: 100.0 * close_count as f64 / total_unsup.max(1) as f64,
        matching,
    })
}

/// Writes per-landmark accuracy and mean error as CSV.
pub fn write_per_landmark_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("landmark,accuracy,mean_error\n");
    for (i, (acc, err)) in report
        .per_landmark_accuracy
        .iter()
        .zip(&report.per_landmark_mean_error)
        .enumerate()
    {
        out.push_str(&format!("{i},{acc},{err}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_points(n: usize, k: usize, seed: u64) -> Vec<Vec<Point2>> {
        let mut rng = crate::rng::rng_for(seed, "evalpts", 0);
        (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| Point2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn regressor_identity_fit_has_zero_residual() {
        let pts = grid_points(20, 5, 1);
        let reg = fit_regressor(&pts, &pts).unwrap();
        assert!(reg.residual(&pts, &pts) < 1e-12);
    }

    #[test]
    fn regressor_doubling_map_recovered() {
        let pts = grid_points(20, 5, 2);
        let doubled: Vec<Vec<Point2>> = pts
            .iter()
            .map(|v| v.iter().map(|p| Point2::new(2.0 * p.x, 2.0 * p.y)).collect())
            .collect();
        let reg = fit_regressor(&pts, &doubled).unwrap();
        assert!(reg.residual(&pts, &doubled) < 1e-10);
        let pred = reg.predict(&pts[3]);
        for (p, q) in pred.iter().zip(&doubled[3]) {
            assert!(p.dist(q) < 1e-6);
        }
    }

    #[test]
    fn regressor_matches_normal_equations_oracle() {
        // Full-rank random instance; compare residual against the explicit
        // normal-equations solution.
        let unsup = grid_points(40, 4, 3);
        let gt = grid_points(40, 3, 4);
        let reg = fit_regressor(&unsup, &gt).unwrap();

        let u = stack(&unsup);
        let g = stack(&gt);
        let utu = u.transpose() * &u;
        let utg = u.transpose() * &g;
        let wt = utu.lu().solve(&utg).expect("full rank");
        let mut oracle_residual = 0.0;
        let pred = &u * &wt;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                oracle_residual += (pred[(i, j)] - g[(i, j)]).powi(2);
            }
        }
        assert!((reg.residual(&unsup, &gt) - oracle_residual).abs() < 1e-8);
    }

    #[test]
    fn nme_closed_forms() {
        let a = vec![Point2::new(0.0, 0.0)];
        let b = vec![Point2::new(3.0, 4.0)];
        assert_eq!(nme(&a, &a, 5.0).unwrap(), 0.0);
        assert!((nme(&a, &b, 5.0).unwrap() - 100.0).abs() < 1e-12);
        // Joint scaling of coordinates and normalizer is invariant.
        let a2 = vec![Point2::new(0.0, 0.0)];
        let b2 = vec![Point2::new(6.0, 8.0)];
        assert!((nme(&a2, &b2, 10.0).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn nme_scales_inversely_with_normalizer() {
        let a = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)];
        let b = vec![Point2::new(2.0, 1.0), Point2::new(0.0, 3.0)];
        let n1 = nme(&a, &b, 2.0).unwrap();
        let n2 = nme(&a, &b, 4.0).unwrap();
        assert!((n1 / n2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn permuted_landmarks_give_zero_forward_and_backward_nme() {
        let gt = grid_points(30, 5, 7);
        // unsup = gt with a fixed permutation of the landmark indices.
        let perm = [3usize, 0, 4, 1, 2];
        let unsup: Vec<Vec<Point2>> = gt
            .iter()
            .map(|v| perm.iter().map(|&j| v[j]).collect())
            .collect();
        let train: Vec<usize> = (0..20).collect();
        let test: Vec<usize> = (20..30).collect();
        let report = forward_backward_eval(
            &unsup,
            &gt,
            &train,
            &test,
            NormalizerKind::Custom { value: 10.0 },
        )
        .unwrap();
        assert!(report.forward_nme < 1e-6, "fwd {}", report.forward_nme);
        assert!(report.backward_nme < 1e-6, "bwd {}", report.backward_nme);
    }

    #[test]
    fn noisy_landmark_inflates_backward_more_than_forward() {
        // Unsupervised set: the 6 gt landmarks plus one redundant column.
        // Replacing the redundant column with per-image uniform noise leaves
        // the forward regressor all the information it needs, but the
        // backward regressor cannot predict noise.
        let gt = grid_points(60, 6, 8);
        let mut rng = crate::rng::rng_for(9, "noisy", 0);
        let clean_unsup: Vec<Vec<Point2>> = gt
            .iter()
            .map(|v| {
                let mut u = v.clone();
                u.push(Point2::new(v[0].x + 1.0, v[0].y));
                u
            })
            .collect();
        let mut noisy_unsup = clean_unsup.clone();
        for img in &mut noisy_unsup {
            img[6] = Point2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0));
        }
        let train: Vec<usize> = (0..40).collect();
        let test: Vec<usize> = (40..60).collect();
        let norm = NormalizerKind::Custom { value: 10.0 };
        let clean = forward_backward_eval(&clean_unsup, &gt, &train, &test, norm).unwrap();
        let noisy = forward_backward_eval(&noisy_unsup, &gt, &train, &test, norm).unwrap();
        assert!(noisy.backward_nme > clean.backward_nme + 1.0);
        // Forward changes little while backward blows up.
        assert!(noisy.forward_nme < clean.forward_nme + 1.0);
        assert!(noisy.forward_nme < noisy.backward_nme);
    }

    #[test]
    fn ced_reaches_one_and_is_monotone() {
        let gt = grid_points(30, 4, 10);
        let unsup = grid_points(30, 4, 11);
        let train: Vec<usize> = (0..20).collect();
        let test: Vec<usize> = (20..30).collect();
        let report =
            forward_backward_eval(&unsup, &gt, &train, &test, NormalizerKind::BboxSqrtArea)
                .unwrap();
        report.validate().unwrap();
        assert!((report.ced.last().unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_invariant_under_unsup_index_permutation() {
        let gt = grid_points(40, 5, 12);
        let unsup = grid_points(40, 5, 13);
        let permuted: Vec<Vec<Point2>> = unsup
            .iter()
            .map(|v| [4usize, 2, 0, 3, 1].iter().map(|&j| v[j]).collect())
            .collect();
        let train: Vec<usize> = (0..25).collect();
        let test: Vec<usize> = (25..40).collect();
        let norm = NormalizerKind::Custom { value: 8.0 };
        let a = forward_backward_eval(&unsup, &gt, &train, &test, norm).unwrap();
        let b = forward_backward_eval(&permuted, &gt, &train, &test, norm).unwrap();
        assert!((a.forward_nme - b.forward_nme).abs() < 1e-9);
        assert!((a.backward_nme - b.backward_nme).abs() < 1e-9);
    }

    #[test]
    fn raw_metrics_perfect_when_unsup_equals_gt() {
        let gt = grid_points(30, 5, 14);
        let split_a: Vec<usize> = (0..15).collect();
        let split_b: Vec<usize> = (15..30).collect();
        let m = raw_landmark_metrics(
            &gt,
            &gt,
            &split_a,
            &split_b,
            RawThresholds { accuracy_px: 3.0, precision_px: 3.0, pck_px: 3.0 },
        )
        .unwrap();
        assert!(m.per_gt_accuracy.iter().all(|&a| (a - 100.0).abs() < 1e-9));
        assert!((m.precision - 100.0).abs() < 1e-9);
    }

    #[test]
    fn raw_metrics_zero_when_unsup_far_from_gt() {
        let mut gt = grid_points(20, 4, 15);
        for img in &mut gt {
            for p in img.iter_mut() {
                p.x = p.x.min(10.0);
                p.y = p.y.min(10.0);
            }
        }
        let unsup: Vec<Vec<Point2>> = gt
            .iter()
            .map(|v| v.iter().map(|_| Point2::new(63.0, 63.0)).collect())
            .collect();
        let split_a: Vec<usize> = (0..10).collect();
        let split_b: Vec<usize> = (10..20).collect();
        let m = raw_landmark_metrics(
            &unsup,
            &gt,
            &split_a,
            &split_b,
            RawThresholds { accuracy_px: 3.0, precision_px: 3.0, pck_px: 3.0 },
        )
        .unwrap();
        assert!(m.per_gt_accuracy.iter().all(|&a| a == 0.0));
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn precision_tracks_known_mixture_fraction() {
        // q of the unsup points are copied from gt, the rest pushed far away;
        // precision must equal q within binomial 3σ.
        let mut rng = crate::rng::rng_for(16, "precision", 0);
        let n = 500;
        let k = 20;
        let gt = grid_points(n, k, 17);
        let q = 0.3;
        let mut hits = 0usize;
        let unsup: Vec<Vec<Point2>> = gt
            .iter()
            .map(|v| {
                v.iter()
                    .map(|p| {
                        if rng.gen_range(0.0..1.0) < q {
                            hits += 1;
                            *p
                        } else {
                            Point2::new(p.x + 100.0, p.y + 100.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let split: Vec<usize> = (0..n).collect();
        let m = raw_landmark_metrics(
            &unsup,
            &gt,
            &split,
            &split,
            RawThresholds { accuracy_px: 1.0, precision_px: 1.0, pck_px: 1.0 },
        )
        .unwrap();
        let expect = 100.0 * hits as f64 / (n * k) as f64;
        let sigma = 100.0 * (q * (1.0 - q) / (n * k) as f64).sqrt();
        assert!(
            (m.precision - expect).abs() <= 3.0 * sigma + 1e-9,
            "precision {} vs {expect} (3σ {})",
            m.precision,
            3.0 * sigma
        );
    }
}
