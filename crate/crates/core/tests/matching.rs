//! Hungarian matching against exhaustive enumeration of injective assignments.

use owcod_core::detector::hungarian_match;
use proptest::prelude::*;

/// Lexicographically first minimum-cost assignment, gt 0 first, each gt's
/// prediction index ascending. Costs within a relative 1e-12 of the minimum
/// count as ties.
fn brute_force(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    fn rec(cost: &[Vec<f64>], current: &mut Vec<usize>, all: &mut Vec<(Vec<usize>, f64)>) {
        if current.len() == cost[0].len() {
            let c = current.iter().enumerate().map(|(g, &p)| cost[p][g]).sum();
            all.push((current.clone(), c));
            return;
        }
        for p in 0..cost.len() {
            if !current.contains(&p) {
                current.push(p);
                rec(cost, current, all);
                current.pop();
            }
        }
    }
    let mut all = Vec::new();
    rec(cost, &mut Vec::new(), &mut all);
    let min = all.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * min.abs().max(1.0);
    let (assign, c) = all.into_iter().find(|a| a.1 <= min + tol).expect("n_gt <= n_pred");
    (assign.into_iter().enumerate().map(|(g, p)| (p, g)).collect(), c)
}

fn cost_matrix(max_pred: usize, max_gt: usize, levels: u32) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_gt)
        .prop_flat_map(move |g| (g..=max_pred).prop_map(move |p| (p, g)))
        .prop_flat_map(move |(p, g)| {
            prop::collection::vec(prop::collection::vec(0..levels, g), p)
                .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn matches_brute_force_with_ties(cost in cost_matrix(6, 4, 4)) {
        let a = hungarian_match(&cost).unwrap();
        let (pairs, c) = brute_force(&cost);
        prop_assert_eq!(a.total_cost, c);
        prop_assert_eq!(a.pairs, pairs);
    }

    #[test]
    fn matches_brute_force_continuous(cost in cost_matrix(6, 5, 1_000_000)) {
        let cost: Vec<Vec<f64>> = cost.into_iter().map(|r| r.into_iter().map(|v| v / 1e6).collect()).collect();
        let a = hungarian_match(&cost).unwrap();
        let (pairs, c) = brute_force(&cost);
        prop_assert!((a.total_cost - c).abs() < 1e-9);
        prop_assert_eq!(a.pairs, pairs);
    }
}

#[test]
fn more_ground_truth_than_predictions_is_an_error() {
    assert!(hungarian_match(&[vec![0.0, 1.0]]).is_err());
}

#[test]
fn no_ground_truth_is_an_empty_assignment() {
    let a = hungarian_match(&[vec![], vec![]]).unwrap();
    assert!(a.pairs.is_empty());
}
