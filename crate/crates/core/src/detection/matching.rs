use super::{param_delta, BoxParams, DetectionSet, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Injective map from ground-truth rows to prediction rows. Predictions
/// not listed are targets for "no object".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub pred_of_gt: Vec<usize>,
    pub num_preds: usize,
}

impl Assignment {
    pub fn new(pred_of_gt: Vec<usize>, num_preds: usize) -> Result<Self> {
        let mut seen = vec![false; num_preds];
        for &p in &pred_of_gt {
            if p >= num_preds || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("assignment {pred_of_gt:?} is not injective into {num_preds}")));
            }
        }
        Ok(Self { pred_of_gt, num_preds })
    }

    /// Ground-truth row matched to each prediction, if any.
    pub fn gt_of_pred(&self) -> Vec<Option<usize>> {
        let mut v = vec![None; self.num_preds];
        for (g, &p) in self.pred_of_gt.iter().enumerate() {
            v[p] = Some(g);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.pred_of_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_of_gt.is_empty()
    }
}

/// Minimum-cost assignment of every row to a distinct column for an
/// `n × m` cost matrix with `n ≤ m`. Rows are inserted in index order and
/// ties resolve toward the lowest column index.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    // Potentials over 1-based rows/cols; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

pub fn assignment_cost(cost: &Matrix, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

/// `M × N` matching cost: `λ_cls · (−p_j[class_i]) + λ_box · Σ_k |Δ_k|`.
pub fn build_cost_matrix<B: BoxParams>(
    preds: &DetectionSet<B>,
    gt: &GroundTruth<B>,
    class_weight: f64,
    box_weight: f64,
) -> Matrix {
    let mut c = Matrix::zeros(gt.len(), preds.len());
    let pred_params: Vec<Vec<f64>> = preds.boxes.iter().map(|b| b.params()).collect();
    for (i, g) in gt.boxes.iter().enumerate() {
        let gp = g.params();
        for (j, pp) in pred_params.iter().enumerate() {
            let l1: f64 = (0..B::DIM).map(|k| param_delta::<B>(pp, &gp, k).abs()).sum();
            let v = -class_weight * preds.class_probs[j][gt.labels[i]] + box_weight * l1;
            c.set(i, j, v);
        }
    }
    c
}

pub fn match_predictions<B: BoxParams>(
    preds: &DetectionSet<B>,
    gt: &GroundTruth<B>,
    class_weight: f64,
    box_weight: f64,
) -> Result<Assignment> {
    if gt.len() > preds.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth objects exceed {} proposals",
            gt.len(),
            preds.len()
        )));
    }
    let cost = build_cost_matrix(preds, gt, class_weight, box_weight);
    Assignment::new(hungarian(&cost), preds.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over all injections of rows into columns.
    pub(crate) fn brute_force(cost: &Matrix) -> f64 {
        fn rec(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        if cost.rows() == 0 {
            0.0
        } else {
            best
        }
    }

    #[test]
    fn random_five_by_eight_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let data = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = Matrix::from_vec(5, 8, data);
            let a = hungarian(&c);
            assert!(Assignment::new(a.clone(), 8).is_ok());
            assert!((assignment_cost(&c, &a) - brute_force(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identity() {
        let c = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let a = hungarian(&c);
        assert!((assignment_cost(&c, &a) - 6.0).abs() < 1e-12);
        let flat = Matrix::filled(4, 4, 0.5);
        assert_eq!(hungarian(&flat), vec![0, 1, 2, 3]);
    }

    #[test]
    fn exact_prediction_is_matched() {
        let g = Box3D::new(5.0, 1.0, -1.0, 4.0, 1.8, 1.5, 0.3).unwrap();
        let other = Box3D::new(20.0, -4.0, -1.0, 4.0, 1.8, 1.5, 0.0).unwrap();
        let preds = DetectionSet::new(
            vec![other, g, other],
            vec![vec![0.3, 0.3, 0.4], vec![1.0, 0.0, 0.0], vec![0.5, 0.2, 0.3]],
        )
        .unwrap();
        let gt = GroundTruth::new(vec![g], vec![0]).unwrap();
        let a = match_predictions(&preds, &gt, 1.0, 1.0).unwrap();
        assert_eq!(a.pred_of_gt, vec![1]);
        assert_eq!(a.gt_of_pred(), vec![None, Some(0), None]);
    }

    #[test]
    fn too_many_objects_rejected() {
        let g = Box3D::new(5.0, 1.0, -1.0, 4.0, 1.8, 1.5, 0.3).unwrap();
        let preds = DetectionSet::new(vec![g], vec![vec![1.0, 0.0, 0.0]]).unwrap();
        let gt = GroundTruth::new(vec![g, g], vec![0, 0]).unwrap();
        assert!(match_predictions(&preds, &gt, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_assignment(
            m in 1usize..5, extra in 0usize..4, seed in any::<u64>(), shift in -50i32..50
        ) {
            let n = m + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // quarter-integer costs keep the shifted sums exact
            let data: Vec<f64> = (0..m * n).map(|_| f64::from(rng.random_range(0..64)) / 4.0).collect();
            let c = Matrix::from_vec(m, n, data);
            let shifted = c.map(|x| x + f64::from(shift));
            prop_assert_eq!(hungarian(&c), hungarian(&shifted));
        }

        #[test]
        fn optimal_against_enumeration(m in 0usize..5, extra in 0usize..4, seed in any::<u64>()) {
            let n = m + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..10.0)).collect();
            let c = Matrix::from_vec(m, n, data);
            let a = hungarian(&c);
            prop_assert!((assignment_cost(&c, &a) - brute_force(&c)).abs() < 1e-9);
        }
    }
}
