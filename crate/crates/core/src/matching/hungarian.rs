//! Rectangular maximum-weight assignment with a lexicographic tie-break.

use crate::error::{Error, Result};

/// Min-cost assignment of every row to a distinct column; requires `rows <= cols`.
/// Returns the column assigned to each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    // Potentials-based shortest augmenting path, 1-indexed with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
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
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best achievable total similarity over `min(rows, cols)` pairs.
fn best_total(sim: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let transpose = rows.len() > cols.len();
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost: Vec<Vec<f64>> = r
        .iter()
        .map(|&a| {
            c.iter()
                .map(|&b| if transpose { -sim[b][a] } else { -sim[a][b] })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    -assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>()
}

/// Maximum-total-similarity one-to-one matching of rows to columns.
///
/// Exactly `min(rows, cols)` pairs are returned, sorted by row. Among optimal
/// assignments the lexicographically smallest pair list wins: each row, in
/// order, takes the lowest column (or stays unmatched only if it must) that
/// still admits an optimal completion.
pub fn bipartite_match(sim: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = sim.len();
    let cols = sim.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("similarity matrix is empty".into()));
    }
    if sim.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch(
            "similarity matrix rows differ in length".into(),
        ));
    }
    if sim.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("similarity matrix has non-finite entries".into()));
    }
    let target = best_total(sim, &(0..rows).collect::<Vec<_>>(), &(0..cols).collect::<Vec<_>>());
    let tol = 1e-9 * (1.0 + target.abs());
    let pairs_needed = rows.min(cols);

    let mut free_cols: Vec<usize> = (0..cols).collect();
    let mut pairs = Vec::with_capacity(pairs_needed);
    let mut fixed_total = 0.0;
    let mut skipped = 0usize;
    for row in 0..rows {
        if pairs.len() == pairs_needed {
            break;
        }
        let rest: Vec<usize> = (row + 1..rows).collect();
        let mut chosen = None;
        for (k, &col) in free_cols.iter().enumerate() {
            let mut remaining_cols = free_cols.clone();
            remaining_cols.remove(k);
            // The rest must still be able to fill the remaining pairs.
            let still_needed = pairs_needed - pairs.len() - 1;
            if rest.len().min(remaining_cols.len()) < still_needed {
                continue;
            }
            let total = fixed_total + sim[row][col] + best_total(sim, &rest, &remaining_cols);
            if total >= target - tol {
                chosen = Some(k);
                break;
            }
        }
        match chosen {
            Some(k) => {
                let col = free_cols.remove(k);
                fixed_total += sim[row][col];
                pairs.push((row, col));
            }
            None => skipped += 1,
        }
    }
    debug_assert!(skipped <= rows - pairs_needed);
    Ok(pairs)
}
