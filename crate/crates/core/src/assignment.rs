//! Optimal linear assignment (Hungarian algorithm with potentials).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A one-to-one assignment: `perm[i]` is the column matched to row `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(n: usize) -> Assignment {
        Assignment {
            perm: (0..n).collect(),
            total_cost: 0.0,
        }
    }

    pub fn is_permutation(&self) -> bool {
        let n = self.perm.len();
        let mut seen = vec![false; n];
        for &p in &self.perm {
            if p >= n || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }

    pub fn inverse(&self) -> Assignment {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Assignment {
            perm: inv,
            total_cost: self.total_cost,
        }
    }
}

/// Solves the square assignment problem optimally. With `maximize` the total
/// is maximized instead of minimized. Among equally optimal assignments the
/// lexicographically smallest permutation is returned.
pub fn linear_assignment(cost: &Tensor, maximize: bool) -> Result<Assignment> {
    if !cost.is_matrix() || cost.rows() != cost.cols() {
        return Err(Error::Dimension(format!(
            "linear_assignment requires a square matrix, got shape {:?}",
            cost.shape()
        )));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cost matrix contains non-finite values".into()));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Assignment {
            perm: vec![],
            total_cost: 0.0,
        });
    }
    let sign = if maximize { -1.0 } else { 1.0 };
    let a: Vec<f64> = cost.data().iter().map(|v| sign * v).collect();
    let mut perm = solve_min(&a, n);
    canonicalize_ties(&a, n, &mut perm);
    let total_cost = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum::<f64>();
    Ok(Assignment { perm, total_cost })
}

/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// O(n^3). Column index `n` acts as the virtual start column.
fn solve_min(a: &[f64], n: usize) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut pot_row = vec![0.0; n];
    let mut pot_col = vec![0.0; n + 1];
    let mut matched_row = vec![NONE; n + 1]; // matched_row[j]: row assigned to column j
    let mut way = vec![n; n + 1];

    for i in 0..n {
        matched_row[n] = i;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let reduced = a[i0 * n + j] - pot_row[i0] - pot_col[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    pot_row[matched_row[j]] += delta;
                    pot_col[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == NONE {
                break;
            }
        }
        // Augment along the alternating path back to the virtual column.
        while j0 != n {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut perm = vec![0usize; n];
    for j in 0..n {
        if matched_row[j] != NONE {
            perm[matched_row[j]] = j;
        }
    }
    perm
}

/// Resolves exact-tie ambiguity toward the lexicographically smallest
/// permutation: repeatedly swap pairs whose exchange keeps the total cost
/// bit-identical while lowering the earlier row's column index.
fn canonicalize_ties(a: &[f64], n: usize, perm: &mut [usize]) {
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if perm[j] < perm[i] {
                    let current = a[i * n + perm[i]] + a[j * n + perm[j]];
                    let swapped = a[i * n + perm[j]] + a[j * n + perm[i]];
                    if swapped == current {
                        perm.swap(i, j);
                        changed = true;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    /// Exhaustive oracle: enumerates permutations in lexicographic order and
    /// keeps the strictly best one, so ties resolve to the smallest perm.
    fn brute_force(cost: &Tensor, maximize: bool) -> Assignment {
        let n = cost.rows();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut best: Option<Assignment> = None;
        permute(&mut indices, 0, &mut |perm| {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
            let better = match &best {
                None => true,
                Some(b) => {
                    if maximize {
                        total > b.total_cost
                    } else {
                        total < b.total_cost
                    }
                }
            };
            if better {
                best = Some(Assignment {
                    perm: perm.to_vec(),
                    total_cost: total,
                });
            }
        });
        best.unwrap()
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        // Lexicographic order: choose the remaining candidates in ascending
        // order at each position.
        let mut rest: Vec<usize> = items[k..].to_vec();
        rest.sort_unstable();
        for &choice in &rest {
            let pos = items[k..].iter().position(|&x| x == choice).unwrap() + k;
            items.swap(k, pos);
            permute(items, k + 1, visit);
            // restore ascending tail order before next choice
            items[k + 1..].sort_unstable();
            let pos = items[k..].iter().position(|&x| x == choice).unwrap() + k;
            items.swap(k, pos);
        }
    }

    #[test]
    fn diagonal_dominant_two_by_two() {
        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = linear_assignment(&c, false).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn zero_diagonal_identity() {
        let c = Tensor::matrix(3, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let a = linear_assignment(&c, false).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn all_equal_costs_tie_break_to_identity() {
        let c = Tensor::matrix(4, 4, vec![3.0; 16]).unwrap();
        for maximize in [false, true] {
            let a = linear_assignment(&c, maximize).unwrap();
            assert_eq!(a.perm, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn matches_exhaustive_search_small_n() {
        let mut rng = CounterRng::new(2024, 3);
        for trial in 0..100 {
            let n = 2 + (trial % 5); // n in 2..=6
            let data: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
            let c = Tensor::matrix(n, n, data).unwrap();
            for maximize in [false, true] {
                let got = linear_assignment(&c, maximize).unwrap();
                let want = brute_force(&c, maximize);
                assert_eq!(got.perm, want.perm, "n={n} maximize={maximize}");
                assert!((got.total_cost - want.total_cost).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_rows_resolve_lexicographically() {
        // Rows 0 and 1 are identical, so two optima exist; the smaller perm wins.
        let c = Tensor::matrix(3, 3, vec![1.0, 2.0, 5.0, 1.0, 2.0, 5.0, 9.0, 9.0, 0.0]).unwrap();
        let a = linear_assignment(&c, false).unwrap();
        let want = brute_force(&c, false);
        assert_eq!(a.perm, want.perm);
        assert_eq!(a.perm, vec![0, 1, 2]);
    }

    #[test]
    fn non_square_is_dimension_error() {
        let c = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            linear_assignment(&c, false),
            Err(Error::Dimension(_))
        ));
    }
}
