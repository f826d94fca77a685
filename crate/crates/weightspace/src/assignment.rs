//! Linear sum assignment (Hungarian algorithm).
//!
//! `min_cost_assignment` solves a square assignment problem in O(n³) via
//! shortest augmenting paths with potentials. `lexicographic_min_assignment`
//! refines the answer to the lexicographically smallest permutation among
//! all cost-optimal ones, which makes downstream weight matching
//! deterministic under ties.

use crate::error::{Error, Result};

/// Row-major square cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub n: usize,
    pub cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != n * n {
            return Err(Error::Dimension(format!(
                "cost matrix needs {} entries, got {}",
                n * n,
                cost.len()
            )));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("cost matrix has non-finite entries".into()));
        }
        Ok(Self { n, cost })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }
}

/// Minimum-cost perfect assignment; returns `perm` with `perm[row] = col`
/// and the total cost. Ties are resolved arbitrarily (see
/// [`lexicographic_min_assignment`] for deterministic ties).
pub fn min_cost_assignment(m: &CostMatrix) -> (Vec<usize>, f64) {
    let n = m.n;
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // shortest augmenting path formulation, 1-indexed with a virtual 0 slot
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col
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
                    let cur = m.at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| m.at(i, perm[i])).sum();
    (perm, total)
}

/// Minimum-cost assignment, choosing the lexicographically smallest
/// permutation among all optimal ones.
///
/// Rows are fixed greedily: row i takes the smallest column that still
/// permits an optimal completion (checked by re-solving the reduced
/// problem). Equality uses a relative tolerance to absorb float noise.
pub fn lexicographic_min_assignment(m: &CostMatrix) -> (Vec<usize>, f64) {
    let n = m.n;
    let (_, optimal) = min_cost_assignment(m);
    let tol = 1e-9 * (1.0 + optimal.abs());
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut perm = vec![0usize; n];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let mut chosen = None;
        for (slot, &j) in remaining.iter().enumerate() {
            let sub_rows: Vec<usize> = (i + 1..n).collect();
            let sub_cols: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&c| c != j)
                .collect();
            let sub_cost = if sub_rows.is_empty() {
                0.0
            } else {
                let sub = CostMatrix {
                    n: sub_rows.len(),
                    cost: sub_rows
                        .iter()
                        .flat_map(|&r| sub_cols.iter().map(move |&c| (r, c)))
                        .map(|(r, c)| m.at(r, c))
                        .collect(),
                };
                min_cost_assignment(&sub).1
            };
            if fixed_cost + m.at(i, j) + sub_cost <= optimal + tol {
                chosen = Some((slot, j));
                break;
            }
        }
        let (slot, j) = chosen.expect("an optimal completion always exists");
        perm[i] = j;
        fixed_cost += m.at(i, j);
        remaining.remove(slot);
    }
    (perm, fixed_cost)
}
