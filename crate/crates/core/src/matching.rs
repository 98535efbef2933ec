//! One-to-one label assignment between predictions and ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};

/// Dense cost matrix, rows are predictions and columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{rows}x{cols} cost matrix with {} entries", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("cost matrix entry {bad} is not finite")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged cost matrix"));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Matched `(prediction, ground_truth)` pairs plus the unmatched predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|&(_, g)| g)
    }

    pub fn is_positive(&self, pred: usize) -> bool {
        self.pairs.iter().any(|(p, _)| *p == pred)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(p, _)| p)
    }

    pub fn num_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.get(p, g)).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs (Kuhn-Munkres with
/// potentials, O(n^2 m)).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows == 0 {
        return Err(Error::Domain("cost matrix has no rows".into()));
    }
    let (n_pred, n_gt) = (cost.rows, cost.cols);
    if n_gt == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n_pred).collect(),
        });
    }
    // The solver assigns every "worker" row; the shorter side plays that role.
    let transposed = n_pred > n_gt;
    let (n, m) = if transposed { (n_gt, n_pred) } else { (n_pred, n_gt) };
    let at = |i: usize, j: usize| if transposed { cost.get(j, i) } else { cost.get(i, j) };

    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
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
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (row, col) = (owner[j] - 1, j - 1);
            if transposed {
                (col, row)
            } else {
                (row, col)
            }
        })
        .collect();
    pairs.sort_unstable();
    let unmatched = (0..n_pred).filter(|p| pairs.iter().all(|(q, _)| q != p)).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Weights of the matching cost terms (classification, GIoU, L1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

/// `class * (-score) + giou * (1 - GIoU) + l1 * L1` for every prediction/GT pair.
pub fn detr_cost(scores: &[f64], pred: &[BBox], gts: &[BBox], w: CostWeights) -> Result<CostMatrix> {
    if scores.len() != pred.len() {
        return Err(Error::dim("one score per predicted box required"));
    }
    let mut data = Vec::with_capacity(pred.len() * gts.len());
    for (s, p) in scores.iter().zip(pred) {
        for g in gts {
            data.push(w.class * -s + w.giou * (1.0 - giou(*p, *g)) + w.l1 * p.l1(*g));
        }
    }
    CostMatrix::new(pred.len(), gts.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective maps from the shorter side.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, t: bool, i: usize, n: usize, used: &mut Vec<bool>) -> f64 {
            if i == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    let c = if t { cost.get(j, i) } else { cost.get(i, j) };
                    best = best.min(c + rec(cost, t, i + 1, n, used));
                    used[j] = false;
                }
            }
            best
        }
        let t = cost.rows() > cost.cols();
        let (n, m) = if t { (cost.cols(), cost.rows()) } else { (cost.rows(), cost.cols()) };
        rec(cost, t, 0, n, &mut vec![false; m])
    }

    #[test]
    fn single_entry() {
        let c = CostMatrix::from_rows(&[vec![4.2]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&c), 2.0);
    }

    #[test]
    fn rectangular_and_empty() {
        let c = CostMatrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched, vec![0, 2]);

        let e = CostMatrix::new(3, 0, vec![]).unwrap();
        let a = hungarian(&e).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            CostMatrix::from_rows(&[vec![f64::NAN]]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ties_prefer_lowest_prediction() {
        let c = CostMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn detr_cost_examples() {
        let gt = BBox::new(0.5, 0.5, 0.2, 0.3);
        let c = detr_cost(&[1.0], &[gt], &[gt], CostWeights::default()).unwrap();
        assert!((c.get(0, 0) + 2.0).abs() < 1e-15);

        let far = BBox::new(0.1, 0.1, 0.05, 0.05);
        let c = detr_cost(&[1.0, 0.0], &[gt, far], &[gt], CostWeights::default()).unwrap();
        assert!(c.get(0, 0) < c.get(1, 0));

        let c = detr_cost(&[0.3, 0.3], &[far, far], &[gt, gt], CostWeights::default()).unwrap();
        assert_eq!(c.row(0), c.row(1));

        let c = detr_cost(&[0.3], &[far], &[], CostWeights::default()).unwrap();
        assert_eq!((c.rows(), c.cols()), (1, 0));
    }

    fn arb_cost() -> impl Strategy<Value = CostMatrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| CostMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn optimal_and_well_formed(cost in arb_cost()) {
            let a = hungarian(&cost).unwrap();
            prop_assert_eq!(a.pairs.len(), cost.rows().min(cost.cols()));
            let mut gts: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
            gts.sort_unstable();
            gts.dedup();
            prop_assert_eq!(gts.len(), a.pairs.len());
            prop_assert!((a.total_cost(&cost) - brute_force(&cost)).abs() < 1e-9);
            if cost.rows() >= cost.cols() {
                prop_assert_eq!(gts, (0..cost.cols()).collect::<Vec<_>>());
            }
            // Never worse than the identity assignment.
            let ident: f64 = (0..cost.rows().min(cost.cols())).map(|i| cost.get(i, i)).sum();
            prop_assert!(a.total_cost(&cost) <= ident + 1e-9);
        }

        #[test]
        fn shift_invariant(cost in arb_cost(), k in -5.0f64..5.0) {
            // Integer grid keeps both problems free of rounding ties.
            let snapped: Vec<f64> = (0..cost.rows()).flat_map(|r| cost.row(r).to_vec()).map(|v| (v * 8.0).round()).collect();
            let base = CostMatrix::new(cost.rows(), cost.cols(), snapped.clone()).unwrap();
            let shifted = CostMatrix::new(cost.rows(), cost.cols(), snapped.iter().map(|v| v + k.round()).collect()).unwrap();
            let a = hungarian(&base).unwrap();
            let b = hungarian(&shifted).unwrap();
            prop_assert_eq!(a.total_cost(&base), b.total_cost(&base));
        }
    }
}
