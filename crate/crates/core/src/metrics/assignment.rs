//! Exact linear assignment by shortest augmenting paths with potentials
//! (the O(n^3) Hungarian variant on dense float costs).

use ndarray::Array2;

/// Minimum-cost perfect matching on a square cost matrix. Returns the
/// column assigned to each row and the total cost.
pub fn solve_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let (rows, cols) = cost.dim();
    assert_eq!(rows, cols, "assignment requires a square cost matrix");
    let n = rows;
    if n == 0 {
        return (Vec::new(), 0.0);
    }

    // 1-based potentials and matching; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
        // Walk the augmenting path back, flipping the matching.
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
        row_to_col[p[j] - 1] = j - 1;
    }
    let total: f64 = row_to_col.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    (row_to_col, total)
}
