//! O(n³) linear sum assignment with a deterministic lexicographic tie-break.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Assignment {
    /// Column assigned to each row.
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Minimizes the total cost of a square assignment. Among all optimal
/// assignments, returns the one with the lexicographically smallest
/// assignment vector (resolved on the tight-edge graph of the optimal duals).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Empty("cost matrix".into()));
    }
    let mut max_abs = 0.0f64;
    for row in cost {
        if row.len() != n {
            return Err(Error::DimMismatch(format!(
                "cost matrix must be square, row of {} in {}x{}",
                row.len(),
                n,
                n
            )));
        }
        for &c in row {
            if !c.is_finite() {
                return Err(Error::NonFinite("cost matrix".into()));
            }
            max_abs = max_abs.max(c.abs());
        }
    }

    let (row_to_col, u, v) = solve_jv(cost);
    let total: f64 = row_to_col.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();

    // Lexicographic refinement: any perfect matching on tight edges of the
    // optimal duals attains the optimum, so fix rows in order to the smallest
    // feasible tight column.
    let eps = 1e-9 * (1.0 + max_abs);
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost[i][j] - u[i] - v[j] <= eps)
                .collect()
        })
        .collect();
    let refined = lex_smallest_matching(&tight, &row_to_col);
    let refined_total: f64 = refined.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    // Guard against dual slack: keep the refinement only if it attains the
    // same optimum within rounding.
    let (best, best_total) = if refined_total <= total + eps * n as f64 {
        (refined, refined_total.min(total))
    } else {
        (row_to_col, total)
    };
    Ok(Assignment {
        row_to_col: best,
        total_cost: best_total,
    })
}

/// Shortest-augmenting-path assignment; returns (row→col, duals u, duals v).
fn solve_jv(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-indexed arrays; p[j] = row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching on a bipartite graph given as
/// adjacency lists, starting from a known perfect matching.
fn lex_smallest_matching(adj: &[Vec<usize>], initial: &[usize]) -> Vec<usize> {
    let n = adj.len();
    let mut row_of_col: Vec<Option<usize>> = vec![None; n];
    let mut col_of_row: Vec<Option<usize>> = vec![None; n];
    for (i, &j) in initial.iter().enumerate() {
        col_of_row[i] = Some(j);
        row_of_col[j] = Some(i);
    }
    for i in 0..n {
        let current = col_of_row[i].unwrap();
        for &j in &adj[i] {
            if j >= current {
                break; // adjacency is ascending; nothing smaller remains
            }
            // Columns held by already-finalized rows are immovable.
            if matches!(row_of_col[j], Some(h) if h < i) {
                continue;
            }
            // Reroute whoever else holds column j through other edges.
            if try_swap(adj, &mut col_of_row, &mut row_of_col, i, j) {
                break;
            }
        }
    }
    col_of_row.into_iter().map(|c| c.unwrap()).collect()
}

/// Attempts to assign row `i` to column `j` by finding an augmenting path
/// for the displaced row; restores state on failure. Rows before `i` keep
/// their columns fixed (they are final).
fn try_swap(
    adj: &[Vec<usize>],
    col_of_row: &mut [Option<usize>],
    row_of_col: &mut [Option<usize>],
    i: usize,
    j: usize,
) -> bool {
    let old_col = col_of_row[i].unwrap();
    let holder = row_of_col[j];
    // Detach i from old_col and claim j.
    col_of_row[i] = Some(j);
    row_of_col[old_col] = None;
    row_of_col[j] = Some(i);
    let displaced = match holder {
        None => return true,
        Some(h) => h,
    };
    col_of_row[displaced] = None;
    // Augment from the displaced row; rows <= i are immovable, so exclude
    // their columns implicitly (they are all matched and never freed).
    let mut visited = vec![false; adj.len()];
    if augment(adj, col_of_row, row_of_col, displaced, i, &mut visited) {
        true
    } else {
        // Roll back.
        col_of_row[displaced] = Some(j);
        row_of_col[j] = Some(displaced);
        col_of_row[i] = Some(old_col);
        row_of_col[old_col] = Some(i);
        false
    }
}

fn augment(
    adj: &[Vec<usize>],
    col_of_row: &mut [Option<usize>],
    row_of_col: &mut [Option<usize>],
    row: usize,
    pinned_up_to: usize,
    visited: &mut [bool],
) -> bool {
    for &j in &adj[row] {
        if visited[j] {
            continue;
        }
        visited[j] = true;
        match row_of_col[j] {
            None => {
                col_of_row[row] = Some(j);
                row_of_col[j] = Some(row);
                return true;
            }
            Some(other) => {
                if other <= pinned_up_to {
                    continue;
                }
                if augment(adj, col_of_row, row_of_col, other, pinned_up_to, visited) {
                    col_of_row[row] = Some(j);
                    row_of_col[j] = Some(row);
                    return true;
                }
            }
        }
    }
    false
}
