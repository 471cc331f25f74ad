//! Minimum-cost perfect matching on a dense square matrix (Hungarian
//! method with potentials and shortest augmenting paths), O(n^3).

/// Returns `assignment[row] = column` minimising the total cost.
pub(crate) fn min_cost_assignment(costs: &[Vec<f64>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(costs.iter().all(|row| row.len() == n));

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = costs[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-weight matching on a rectangular similarity matrix, padded to a
/// square with zeros. Returns matched `(row, col)` pairs and the total.
pub(crate) fn max_weight_matching(sim: &[Vec<f64>], cols: usize) -> (Vec<(usize, usize)>, f64) {
    let rows = sim.len();
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let mut costs = vec![vec![0.0; n]; n];
    for (i, row) in sim.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            costs[i][j] = -s;
        }
    }
    let assignment = min_cost_assignment(&costs);
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        if i < rows && j < cols {
            pairs.push((i, j));
            total += sim[i][j];
        }
    }
    (pairs, total)
}
