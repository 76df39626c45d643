use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Result of a minimum-cost assignment. Rows are predictions, columns are
/// ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs, ascending by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    /// Sum of the costs of the reported pairs.
    pub total_cost: f64,
}

/// Minimum-total-cost one-to-one assignment on a rectangular cost matrix
/// (shortest augmenting paths with potentials, `O(n²m)`).
///
/// With a `gate`, pairs costing more than it are never reported: the
/// solver first maximises the number of admissible pairs, then minimises
/// their cost. Everything left over is unmatched.
pub fn hungarian(cost: &Matrix, gate: Option<f64>) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(Error::Numeric("assignment costs must be finite".into()));
    }
    let (n, m) = cost.shape();
    let transposed = n > m;
    let mut c = if transposed { cost.transpose() } else { cost.clone() };
    if let Some(g) = gate {
        let worst = c.data().iter().filter(|&&v| v <= g).fold(0.0f64, |a, &v| a.max(v.abs()));
        let penalty = (worst + 1.0) * (n.min(m) as f64 + 1.0) * 2.0;
        c = c.map(|v| if v <= g { v } else { penalty });
    }
    let row_to_col = solve(&c);

    let mut pairs: Vec<(usize, usize)> = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &col)| if transposed { (col, r) } else { (r, col) })
        .collect();
    pairs.sort_unstable();
    if let Some(g) = gate {
        pairs.retain(|&(p, t)| cost.get(p, t) <= g);
    }
    let total_cost = pairs.iter().map(|&(p, t)| cost.get(p, t)).sum();
    let mut pred_used = vec![false; n];
    let mut gt_used = vec![false; m];
    for &(p, t) in &pairs {
        pred_used[p] = true;
        gt_used[t] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched_preds: (0..n).filter(|&i| !pred_used[i]).collect(),
        unmatched_gts: (0..m).filter(|&j| !gt_used[j]).collect(),
        total_cost,
    })
}

/// Assigns every row of an `n×m` matrix (`n ≤ m`) to a distinct column.
fn solve(c: &Matrix) -> Vec<usize> {
    let (n, m) = c.shape();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over all injective maps from the smaller side to the larger.
    fn brute_force(cost: &Matrix) -> f64 {
        let (n, m) = cost.shape();
        fn rec(c: &Matrix, row: usize, used: &mut Vec<bool>, flip: bool) -> f64 {
            let (n, m) = if flip { (c.cols(), c.rows()) } else { c.shape() };
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let v = if flip { c.get(j, row) } else { c.get(row, j) };
                    best = best.min(v + rec(c, row + 1, used, flip));
                    used[j] = false;
                }
            }
            best
        }
        let flip = n > m;
        rec(cost, 0, &mut vec![false; n.max(m)], flip)
    }

    #[test]
    fn worked_examples() {
        let a = hungarian(&Matrix::scalar(5.0), None).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 5.0);
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&c, None).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn three_by_three_matches_all_permutations() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]])
            .unwrap();
        let a = hungarian(&c, None).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| c.get(i, p[i])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.total_cost, best);
        assert_eq!(best, 5.0);
    }

    #[test]
    fn gate_and_rectangles() {
        let c = Matrix::from_rows(&[vec![1.0, 9.0], vec![9.0, 8.0], vec![0.5, 7.0]]).unwrap();
        let a = hungarian(&c, None).unwrap();
        assert_eq!(a.pairs.len(), 2);
        // (0,0)+(2,1) = 8 beats (2,0)+(1,1) = 8.5
        assert_eq!(a.total_cost, 8.0);
        assert_eq!(a.unmatched_preds, vec![1]);
        let gated = hungarian(&c, Some(5.0)).unwrap();
        assert_eq!(gated.pairs, vec![(2, 0)]);
        assert_eq!(gated.unmatched_gts, vec![1]);
        assert_eq!(gated.unmatched_preds, vec![0, 1]);
        let empty = hungarian(&Matrix::zeros(0, 3), None).unwrap();
        assert!(empty.pairs.is_empty());
        assert_eq!(empty.unmatched_gts, vec![0, 1, 2]);
    }

    #[test]
    fn gate_prefers_more_admissible_pairs() {
        // the ungated optimum is the anti-diagonal, which the gate rejects
        let c = Matrix::from_rows(&[vec![0.0, 6.0], vec![6.0, 100.0]]).unwrap();
        assert_eq!(hungarian(&c, None).unwrap().pairs, vec![(0, 1), (1, 0)]);
        let a = hungarian(&c, Some(5.0)).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 0.0);
    }

    proptest! {
        #[test]
        fn optimal_against_enumeration(
            n in 1usize..=6, m in 1usize..=6,
            vals in prop::collection::vec(0u32..20, 36),
        ) {
            let c = Matrix::from_vec(n, m, vals[..n * m].iter().map(|&v| v as f64).collect()).unwrap();
            let a = hungarian(&c, None).unwrap();
            prop_assert_eq!(a.pairs.len(), n.min(m));
            prop_assert_eq!(a.total_cost, brute_force(&c));
            let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), a.pairs.len());
            prop_assert_eq!(cols.len(), a.pairs.len());
        }
    }
}
