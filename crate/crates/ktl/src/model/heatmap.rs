//! Target-heatmap rendering, NMS keypoint extraction, and sub-pixel
//! descriptor sampling.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::keypoints::Keypoint;

use super::conv::Tensor;
use super::Heatmap;

/// Renders a single-channel target by placing a unit-peak Gaussian at each
/// point's nearest grid cell and combining overlaps by max, which keeps the
/// target inside [0,1]. An empty point list yields the all-zero map.
pub fn render_target(points: &[Point2], sigma: f64, grid_h: usize, grid_w: usize) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = Tensor::zeros(1, grid_h, grid_w);
    render_into(&mut map, 0, points, sigma);
    map
}

/// Renders one channel of a multi-channel target in place.
pub fn render_into(map: &mut Tensor, channel: usize, points: &[Point2], sigma: f64) {
    let (h, w) = (map.h, map.w);
    let radius = (4.0 * sigma).ceil() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in points {
        let cx = p.x.round();
        let cy = p.y.round();
        let cxi = cx as i64;
        let cyi = cy as i64;
        for y in (cyi - radius).max(0)..=(cyi + radius).min(h as i64 - 1) {
            for x in (cxi - radius).max(0)..=(cxi + radius).min(w as i64 - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 * inv).exp();
                let cell = map.at_mut(channel, y as usize, x as usize);
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

/// Mean squared difference between two heatmaps.
pub fn detector_loss(predicted: &Heatmap, target: &Heatmap) -> Result<f64> {
    if predicted.c != target.c || predicted.h != target.h || predicted.w != target.w {
        return Err(Error::DimMismatch(format!(
            "heatmap {}x{}x{} vs {}x{}x{}",
            predicted.c, predicted.h, predicted.w, target.c, target.h, target.w
        )));
    }
    let n = predicted.data.len() as f64;
    Ok(predicted
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of `detector_loss` w.r.t. the prediction.
pub fn detector_loss_backward(predicted: &Heatmap, target: &Heatmap) -> Tensor {
    let n = predicted.data.len() as f64;
    let mut d = Tensor::zeros(predicted.c, predicted.h, predicted.w);
    for ((g, p), t) in d.data.iter_mut().zip(&predicted.data).zip(&target.data) {
        *g = 2.0 * (p - t) / n;
    }
    d
}

/// Strict local maxima of a single-channel map over the (2·window+1)²
/// neighbourhood with value ≥ threshold, sorted by confidence descending
/// (ties by (y,x)), truncated to `max_points`. Confidence is the map value
/// clamped to [0,1].
pub fn extract_keypoints(
    map: &Heatmap,
    threshold: f64,
    window: usize,
    max_points: usize,
) -> Vec<Keypoint> {
    assert!(window >= 1, "window must be >= 1");
    let (h, w) = (map.h, map.w);
    let win = window as i64;
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.at(0, y, x);
            if v < threshold {
                continue;
            }
            let mut strict = true;
            'scan: for dy in -win..=win {
                for dx in -win..=win {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if map.at(0, ny as usize, nx as usize) >= v {
                        strict = false;
                        break 'scan;
                    }
                }
            }
            if strict {
                peaks.push((v, y, x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks
        .into_iter()
        .take(max_points)
        .map(|(v, y, x)| Keypoint::at(Point2::new(x as f64, y as f64), v.clamp(0.0, 1.0)))
        .collect()
}

/// Bilinear interpolation of the dense feature map at a sub-pixel position,
/// L2-renormalized. The position must be inside [0, w−1]×[0, h−1].
pub fn sample_descriptor(features: &Tensor, position: Point2) -> Result<Vec<f64>> {
    let (corners, weights) = bilinear_corners(features, position)?;
    let plane = features.h * features.w;
    let mut v = vec![0.0; features.c];
    for (idx, wgt) in corners.iter().zip(&weights) {
        for c in 0..features.c {
            v[c] += wgt * features.data[c * plane + idx];
        }
    }
    let norm = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Scatters the loss gradient of one sampled descriptor back into a dense
/// feature-map gradient buffer.
pub fn sample_descriptor_backward(
    features: &Tensor,
    position: Point2,
    d_descriptor: &[f64],
    d_features: &mut Tensor,
) -> Result<()> {
    let (corners, weights) = bilinear_corners(features, position)?;
    let plane = features.h * features.w;
    // Recompute the interpolated pre-normalization vector.
    let mut v = vec![0.0; features.c];
    for (idx, wgt) in corners.iter().zip(&weights) {
        for c in 0..features.c {
            v[c] += wgt * features.data[c * plane + idx];
        }
    }
    let sq = v.iter().map(|x| x * x).sum::<f64>() + 1e-12;
    let n = sq.sqrt();
    let n3 = n * sq;
    let dot: f64 = v.iter().zip(d_descriptor).map(|(a, b)| a * b).sum();
    // d/dv of v/||v||, then distribute over the four corners.
    for c in 0..features.c {
        let dv = d_descriptor[c] / n - v[c] * dot / n3;
        for (idx, wgt) in corners.iter().zip(&weights) {
            d_features.data[c * plane + idx] += wgt * dv;
        }
    }
    Ok(())
}

fn bilinear_corners(features: &Tensor, p: Point2) -> Result<([usize; 4], [f64; 4])> {
    let (h, w) = (features.h, features.w);
    if !(0.0..=(w as f64 - 1.0)).contains(&p.x) || !(0.0..=(h as f64 - 1.0)).contains(&p.y) {
        return Err(Error::Config(format!(
            "descriptor position ({}, {}) outside grid {}x{}",
            p.x, p.y, w, h
        )));
    }
    // Clamp so positions exactly on the far edge use the last cell pair.
    let x0 = (p.x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (p.y.floor() as usize).min(h.saturating_sub(2));
    let fx = p.x - x0 as f64;
    let fy = p.y - y0 as f64;
    let idx = |y: usize, x: usize| y * w + x;
    Ok((
        [
            idx(y0, x0),
            idx(y0, x0 + 1),
            idx(y0 + 1, x0),
            idx(y0 + 1, x0 + 1),
        ],
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_point_list_renders_zero_map() {
        let map = render_target(&[], 1.0, 8, 8);
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_value_one_cell_away() {
        let map = render_target(&[Point2::new(4.0, 4.0)], 1.0, 9, 9);
        assert!((map.at(0, 4, 4) - 1.0).abs() < 1e-12);
        let expect = (-0.5f64).exp();
        assert!((map.at(0, 4, 5) - expect).abs() < 1e-12);
        assert!((map.at(0, 3, 4) - expect).abs() < 1e-12);
    }

    #[test]
    fn overlapping_gaussians_combine_by_max() {
        let a = Point2::new(3.0, 4.0);
        let b = Point2::new(4.0, 4.0);
        let map = render_target(&[a, b], 1.0, 9, 9);
        // Any cell's value is the max of the two closed forms, not the sum.
        for y in 0..9usize {
            for x in 0..9usize {
                let da = (x as f64 - 3.0).powi(2) + (y as f64 - 4.0).powi(2);
                let db = (x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2);
                let expect = (-da / 2.0).exp().max((-db / 2.0).exp());
                assert!((map.at(0, y, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_is_permutation_invariant() {
        let pts = [
            Point2::new(2.0, 2.0),
            Point2::new(6.0, 3.0),
            Point2::new(4.0, 7.0),
        ];
        let a = render_target(&pts, 1.3, 10, 10);
        let rev: Vec<Point2> = pts.iter().rev().copied().collect();
        let b = render_target(&rev, 1.3, 10, 10);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn subpixel_point_keeps_peak_at_nearest_cell() {
        let map = render_target(&[Point2::new(4.4, 3.6)], 1.0, 9, 9);
        assert!((map.at(0, 4, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detector_loss_closed_forms() {
        let a = render_target(&[Point2::new(4.0, 4.0)], 1.0, 8, 8);
        assert_eq!(detector_loss(&a, &a).unwrap(), 0.0);
        let zero = Tensor::zeros(1, 8, 8);
        let mut half = Tensor::zeros(1, 8, 8);
        half.data.iter_mut().for_each(|v| *v = 0.5);
        assert!((detector_loss(&half, &zero).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn detector_loss_matches_reference_sum() {
        let mut rng = crate::rng::rng_for(3, "dl", 0);
        use rand::Rng;
        let mut a = Tensor::zeros(1, 6, 6);
        let mut b = Tensor::zeros(1, 6, 6);
        for v in &mut a.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in &mut b.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut acc = 0.0;
        for (x, y) in a.data.iter().zip(&b.data) {
            acc += (x - y) * (x - y);
        }
        acc /= a.data.len() as f64;
        assert!((detector_loss(&a, &b).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn constant_map_has_no_keypoints() {
        let mut map = Tensor::zeros(1, 8, 8);
        map.data.iter_mut().for_each(|v| *v = 0.7);
        assert!(extract_keypoints(&map, 0.5, 2, 10).is_empty());
    }

    #[test]
    fn single_gaussian_gives_single_peak() {
        let map = render_target(&[Point2::new(5.0, 6.0)], 1.0, 12, 12);
        let kps = extract_keypoints(&map, 0.5, 2, 10);
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].position, Point2::new(5.0, 6.0));
    }

    #[test]
    fn five_separated_gaussians_found() {
        let pts = [
            Point2::new(4.0, 4.0),
            Point2::new(20.0, 4.0),
            Point2::new(4.0, 20.0),
            Point2::new(20.0, 20.0),
            Point2::new(12.0, 12.0),
        ];
        let map = render_target(&pts, 1.0, 25, 25);
        let kps = extract_keypoints(&map, 0.5, 2, 10);
        assert_eq!(kps.len(), 5);
        for p in &pts {
            assert!(kps.iter().any(|k| k.position.dist(p) < 0.5));
        }
    }

    #[test]
    fn nms_invariant_under_constant_shift() {
        let pts = [Point2::new(6.0, 6.0), Point2::new(18.0, 10.0)];
        let map = render_target(&pts, 1.2, 24, 24);
        let mut shifted = map.clone();
        shifted.data.iter_mut().for_each(|v| *v += 0.3);
        let a = extract_keypoints(&map, 0.4, 2, 10);
        let b = extract_keypoints(&shifted, 0.7, 2, 10);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position, y.position);
        }
    }

    fn unit_feature_map() -> Tensor {
        // 2-channel 2x2 map: e1 at (0,0) and (1,0) rows... constructed so the
        // tests below have closed forms.
        let mut f = Tensor::zeros(2, 2, 2);
        // location (y=0,x=0): e1; (y=0,x=1): e2; (y=1,*): e1.
        *f.at_mut(0, 0, 0) = 1.0;
        *f.at_mut(1, 0, 1) = 1.0;
        *f.at_mut(0, 1, 0) = 1.0;
        *f.at_mut(0, 1, 1) = 1.0;
        f
    }

    #[test]
    fn integer_position_returns_grid_vector() {
        let f = unit_feature_map();
        let d = sample_descriptor(&f, Point2::new(1.0, 0.0)).unwrap();
        assert!((d[0] - 0.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn midpoint_of_identical_vectors_is_that_vector() {
        let f = unit_feature_map();
        let d = sample_descriptor(&f, Point2::new(0.5, 1.0)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);
    }

    #[test]
    fn midpoint_of_orthonormal_pair_is_diagonal() {
        let f = unit_feature_map();
        let d = sample_descriptor(&f, Point2::new(0.5, 0.0)).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((d[0] - s).abs() < 1e-9 && (d[1] - s).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_position_rejected() {
        let f = unit_feature_map();
        assert!(sample_descriptor(&f, Point2::new(1.5, 0.0)).is_err());
        assert!(sample_descriptor(&f, Point2::new(-0.1, 0.0)).is_err());
    }

    #[test]
    fn descriptor_backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(17, "descbwd", 0);
        let mut f = Tensor::zeros(3, 4, 4);
        for v in &mut f.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pos = Point2::new(1.7, 2.3);
        let coef: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |f: &Tensor| -> f64 {
            sample_descriptor(f, pos)
                .unwrap()
                .iter()
                .zip(&coef)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut d_f = Tensor::zeros(3, 4, 4);
        sample_descriptor_backward(&f, pos, &coef, &mut d_f).unwrap();
        let h = 1e-6;
        for i in (0..f.data.len()).step_by(3) {
            let mut fp = f.clone();
            fp.data[i] += h;
            let mut fm = f.clone();
            fm.data[i] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            assert!((fd - d_f.data[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
