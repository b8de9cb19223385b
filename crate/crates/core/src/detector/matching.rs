use super::{DetectorError, LossWeights, Result};
use crate::boxes::{giou, BBox};

/// Matched `(pred, gt)` pairs sorted by gt index, and their summed cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn pred_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// `cost[pred][gt]` = λ_cls (1 - p_gt_class) + λ_L1 |box - gt|_1 + λ_giou (1 - GIoU).
pub fn match_cost_matrix(
    pred_boxes: &[BBox],
    pred_probs: &[Vec<f64>],
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    pred_boxes
        .iter()
        .zip(pred_probs)
        .map(|(pb, probs)| {
            gt_boxes
                .iter()
                .zip(gt_classes)
                .map(|(gb, &c)| {
                    w.cls * (1.0 - probs[c]) + w.l1 * pb.l1(gb) + w.giou * (1.0 - giou(pb, gb))
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of `rows` (n) to distinct columns (m >= n), by
/// shortest augmenting paths with potentials; O(n^2 m).
fn solve_rows(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let m = cost[0].len();
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
                if !used[j] {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_to_col.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (row_to_col, total)
}

/// Exact minimum-cost bipartite matching of every ground truth to a distinct
/// prediction. `cost[pred][gt]`. Among optimal assignments, ground truths are
/// visited in index order and each takes the lowest prediction index that
/// still admits an optimal completion.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n_pred = cost.len();
    let n_gt = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n_gt) {
        return Err(DetectorError::Input("ragged cost matrix".into()));
    }
    if n_gt == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    if n_gt > n_pred {
        return Err(DetectorError::Input(format!(
            "{n_gt} ground truths exceed {n_pred} predictions"
        )));
    }
    let by_gt: Vec<Vec<f64>> = (0..n_gt)
        .map(|gt| (0..n_pred).map(|p| cost[p][gt]).collect())
        .collect();
    let (_, best) = solve_rows(&by_gt);
    let tol = 1e-12 * best.abs().max(1.0);

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(n_gt);
    let mut fixed_cost = 0.0;
    for gt in 0..n_gt {
        let used: Vec<usize> = fixed.iter().map(|f| f.0).collect();
        let free_preds: Vec<usize> = (0..n_pred).filter(|p| !used.contains(p)).collect();
        let mut chosen = None;
        for &pred in &free_preds {
            let rest_preds: Vec<usize> = free_preds.iter().copied().filter(|&p| p != pred).collect();
            let sub: Vec<Vec<f64>> = (gt + 1..n_gt)
                .map(|g2| rest_preds.iter().map(|&p| cost[p][g2]).collect())
                .collect();
            let (_, sub_cost) = solve_rows(&sub);
            let total = fixed_cost + cost[pred][gt] + sub_cost;
            if total <= best + tol {
                chosen = Some(pred);
                break;
            }
        }
        let pred = chosen.expect("an optimal completion always exists");
        fixed_cost += cost[pred][gt];
        fixed.push((pred, gt));
    }
    Ok(Assignment {
        pairs: fixed,
        total_cost: fixed_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let a = hungarian_match(&[vec![0.3]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn unique_optimum() {
        let a = hungarian_match(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn ties_prefer_lowest_prediction() {
        let a = hungarian_match(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let b = hungarian_match(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn more_gts_than_preds_rejected() {
        assert!(hungarian_match(&[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn empty_gts() {
        let a = hungarian_match(&[vec![], vec![]]).unwrap();
        assert!(a.pairs.is_empty());
    }
}
