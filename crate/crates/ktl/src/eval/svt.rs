//! Singular value thresholding for matrix completion. Observed entries are
//! written back verbatim after the iteration, so completion never perturbs a
//! detected point.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const SVT_STEP: f64 = 1.2;
pub const SVT_MAX_ITERS: usize = 500;

/// Default threshold τ = 5·√(rows·cols).
pub fn default_tau(rows: usize, cols: usize) -> f64 {
    5.0 * ((rows * cols) as f64).sqrt()
}

/// Completes one K×N plane. `observed[r][c]` marks known entries; every row
/// and column must contain at least one.
pub fn svt(
    values: &[Vec<f64>],
    observed: &[Vec<bool>],
    tau: f64,
    step: f64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>> {
    let rows = values.len();
    if rows == 0 || values[0].is_empty() {
        return Err(Error::Empty("matrix".into()));
    }
    let cols = values[0].len();
    for r in 0..rows {
        if values[r].len() != cols || observed[r].len() != cols {
            return Err(Error::DimMismatch("ragged matrix".into()));
        }
    }
    for r in 0..rows {
        if !observed[r].iter().any(|&o| o) {
            return Err(Error::Empty(format!("row {r} has no observed entry")));
        }
    }
    for c in 0..cols {
        if !(0..rows).any(|r| observed[r][c]) {
            return Err(Error::Empty(format!("column {c} has no observed entry")));
        }
    }

    let mut norm_obs = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if observed[r][c] {
                norm_obs += values[r][c] * values[r][c];
            }
        }
    }
    let norm_obs = norm_obs.sqrt().max(1e-12);

    let mut y = DMatrix::<f64>::zeros(rows, cols);
    let mut x = DMatrix::<f64>::zeros(rows, cols);
    for _ in 0..max_iters {
        x = shrink(&y, tau);
        let mut res = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                if observed[r][c] {
                    let d = values[r][c] - x[(r, c)];
                    y[(r, c)] += step * d;
                    res += d * d;
                }
            }
        }
        if res.sqrt() / norm_obs < 1e-7 {
            break;
        }
    }

    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r][c] = if observed[r][c] {
                values[r][c]
            } else {
                x[(r, c)]
            };
        }
    }
    Ok(out)
}

fn shrink(y: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let svd = y.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut s = svd.singular_values.clone();
    for v in s.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
    let rank = s.iter().filter(|&&v| v > 0.0).count();
    if rank == 0 {
        return DMatrix::zeros(y.nrows(), y.ncols());
    }
    let mut acc = DMatrix::<f64>::zeros(y.nrows(), y.ncols());
    for i in 0..s.len() {
        if s[i] > 0.0 {
            let ui = u.column(i);
            let vi = vt.row(i);
            for r in 0..y.nrows() {
                let coef = s[i] * ui[r];
                for c in 0..y.ncols() {
                    acc[(r, c)] += coef * vi[c];
                }
            }
        }
    }
    acc
}

/// Fills missing entries with per-row means of the observed entries
/// (test-time completion).
pub fn mean_fill(values: &[Vec<f64>], observed: &[Vec<bool>], row_means: &[f64]) -> Vec<Vec<f64>> {
    values
        .iter()
        .zip(observed)
        .enumerate()
        .map(|(r, (vals, obs))| {
            vals.iter()
                .zip(obs)
                .map(|(&v, &o)| if o { v } else { row_means[r] })
                .collect()
        })
        .collect()
}

/// Mean of observed entries per row, for `mean_fill` at test time.
pub fn observed_row_means(values: &[Vec<f64>], observed: &[Vec<bool>]) -> Vec<f64> {
    values
        .iter()
        .zip(observed)
        .map(|(vals, obs)| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (&v, &o) in vals.iter().zip(obs) {
                if o {
                    sum += v;
                    n += 1;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fully_observed_matrix_unchanged() {
        let values = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let observed = vec![vec![true, true], vec![true, true]];
        let out = svt(&values, &observed, default_tau(2, 2), SVT_STEP, 50).unwrap();
        assert_eq!(out, values);
    }

    #[test]
    fn observed_entries_bit_exact_after_completion() {
        let mut rng = crate::rng::rng_for(2024, "svt", 0);
        let (k, n) = (8, 20);
        let values: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let observed: Vec<Vec<bool>> = (0..k)
            .map(|r| (0..n).map(|c| (r + c) % 4 != 0).collect())
            .collect();
        let out = svt(&values, &observed, default_tau(k, n), SVT_STEP, 100).unwrap();
        for r in 0..k {
            for c in 0..n {
                if observed[r][c] {
                    assert!(out[r][c] == values[r][c], "entry ({r},{c}) modified");
                }
            }
        }
    }

    #[test]
    fn rank2_recovery_small() {
        // Rank-2 ground truth with 20% entries hidden.
        let mut rng = crate::rng::rng_for(9, "svt_rank2", 0);
        let (k, n) = (12, 40);
        let a: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let truth: Vec<Vec<f64>> = (0..k)
            .map(|r| (0..n).map(|c| a[r].0 * b[c].0 + a[r].1 * b[c].1).collect())
            .collect();
        let observed: Vec<Vec<bool>> = (0..k)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0) > 0.2).collect())
            .collect();
        let out = svt(&truth, &observed, default_tau(k, n), SVT_STEP, SVT_MAX_ITERS).unwrap();
        let mut err = 0.0;
        let mut norm = 0.0;
        for r in 0..k {
            for c in 0..n {
                if !observed[r][c] {
                    err += (out[r][c] - truth[r][c]).powi(2);
                    norm += truth[r][c].powi(2);
                }
            }
        }
        let rel = (err / norm.max(1e-12)).sqrt();
        assert!(rel <= 1e-2, "relative recovery error {rel}");
    }

    #[test]
    fn empty_row_rejected() {
        let values = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let observed = vec![vec![false, false], vec![true, true]];
        assert!(svt(&values, &observed, 1.0, SVT_STEP, 10).is_err());
    }

    #[test]
    fn mean_fill_uses_training_means() {
        let values = vec![vec![1.0, 3.0, 0.0]];
        let observed = vec![vec![true, true, false]];
        let means = observed_row_means(&values, &observed);
        assert_eq!(means, vec![2.0]);
        let filled = mean_fill(&values, &observed, &means);
        assert_eq!(filled[0], vec![1.0, 3.0, 2.0]);
    }
}
