//! Minimum-cost injective assignment (Hungarian algorithm, shortest
//! augmenting path form with potentials, O(G²·Q)).

use crate::error::{Error, Result};

/// Assign each of G ground-truth instances to a distinct query minimizing
/// total cost. `cost` is query-major: `cost[q][g]`. Requires G ≤ Q and finite
/// costs. Returns, per ground-truth index, the assigned query. Tie handling
/// between equal-cost optima follows the algorithm's fixed scan order and is
/// deterministic.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let q_cnt = cost.len();
    let g_cnt = cost.first().map(|r| r.len()).unwrap_or(0);
    if g_cnt == 0 {
        return Ok(Vec::new());
    }
    if g_cnt > q_cnt {
        return Err(Error::numeric(format!(
            "cannot assign {g_cnt} instances to {q_cnt} queries"
        )));
    }
    for row in cost {
        if row.len() != g_cnt {
            return Err(Error::shape("ragged cost matrix".to_string()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite cost in assignment".to_string()));
        }
    }

    // 1-indexed potentials; rows = ground truths, columns = queries.
    let n = g_cnt;
    let m = q_cnt;
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let big = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // column -> row
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![big; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = big;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
    debug_assert!(assignment.iter().all(|&q| q != usize::MAX));
    Ok(assignment)
}

/// Total cost of an assignment, summed in ground-truth index order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(g, &q)| cost[q][g]).sum()
}
