//! Minimum-cost bipartite assignment.

use crate::error::{BicaError, Result};

/// Injective `(row, col)` pairs of a minimum-cost assignment, sorted by row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn total(&self, cost: &[f64], cols: usize) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
    }

    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Shortest augmenting path with potentials, `O(n²m)` for `n ≤ m`.
/// Returns the column assigned to each row.
fn solve(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost assignment of `min(rows, cols)` pairs for a row-major
/// `rows×cols` cost matrix.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<MatchAssignment> {
    if cost.len() != rows * cols {
        return Err(BicaError::Shape(format!(
            "cost has {} entries, expected {rows}×{cols}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| c.is_nan()) {
        return Err(BicaError::Invalid("NaN in assignment cost".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchAssignment::default());
    }
    let mut pairs: Vec<(usize, usize)> = if rows <= cols {
        solve(cost, rows, cols).into_iter().enumerate().collect()
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        solve(&t, cols, rows)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    Ok(MatchAssignment { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all injective maps from the smaller side.
    pub(crate) fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(
            cost: &[f64],
            rows: usize,
            cols: usize,
            r: usize,
            used: &mut Vec<bool>,
            transpose: bool,
        ) -> f64 {
            let (n, m) = if transpose {
                (cols, rows)
            } else {
                (rows, cols)
            };
            if r == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..m {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let here = if transpose {
                    cost[c * cols + r]
                } else {
                    cost[r * cols + c]
                };
                best = best.min(here + rec(cost, rows, cols, r + 1, used, transpose));
                used[c] = false;
            }
            best
        }
        let transpose = rows > cols;
        let m = if transpose { rows } else { cols };
        rec(cost, rows, cols, 0, &mut vec![false; m], transpose)
    }

    #[test]
    fn fixtures() {
        let a = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&[1.0, 2.0, 2.0, 1.0], 2), 2.0);
        let n = 5;
        let c: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 100.0 })
            .collect();
        assert_eq!(
            hungarian(&c, n, n).unwrap().pairs,
            (0..n).map(|i| (i, i)).collect::<Vec<_>>()
        );
        assert!(hungarian(&[f64::NAN], 1, 1).is_err());
        assert!(hungarian(&[], 0, 3).unwrap().pairs.is_empty());
    }

    #[test]
    fn matches_brute_force_up_to_7x7() {
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.gen_range(1..=7);
            let cols = rng.gen_range(1..=7);
            // integer-valued costs make ties common
            let cost: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(0..10) as f64)
                .collect();
            let a = hungarian(&cost, rows, cols).unwrap();
            assert_eq!(a.pairs.len(), rows.min(cols));
            let mut rs: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!((rs.len(), cs.len()), (a.pairs.len(), a.pairs.len()));
            assert_eq!(
                a.total(&cost, cols),
                brute_force(&cost, rows, cols),
                "seed {seed} {rows}x{cols}"
            );
        }
    }
}
