//! Reference implementations shared by integration tests.

#![allow(dead_code)]

use owcod_core::bench::{GroundTruth, Prediction};
use owcod_core::boxes::iou;

/// Per-class AP straight from the definition: greedy matching in score order,
/// precision at recall r is the best precision at any rank reaching r.
pub fn oracle_class_ap(preds: &[Prediction], gts: &[GroundTruth], class: &str, thr: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_name == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&Prediction> = preds.iter().filter(|p| p.class_name == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, p) in order.iter().enumerate() {
        let candidate = (0..gts.len())
            .filter(|&j| !used[j] && gts[j].image_id == p.image_id)
            .map(|j| (j, iou(&p.bbox, &gts[j].bbox)))
            .filter(|&(_, o)| o >= thr)
            .fold(None, |best: Option<(usize, f64)>, (j, o)| match best {
                Some((_, b)) if b >= o => best,
                _ => Some((j, o)),
            });
        if let Some((j, _)) = candidate {
            used[j] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let total: f64 = (0..101)
        .map(|i| {
            let r = i as f64 / 100.0;
            points
                .iter()
                .filter(|&&(rec, _)| rec >= r)
                .map(|&(_, prec)| prec)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

/// Mean AP and AP50 over the classes of `classes` that have ground truth.
pub fn oracle_map(preds: &[Prediction], gts: &[GroundTruth], classes: &[&str]) -> Option<(f64, f64)> {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut maps = Vec::new();
    let mut ap50s = Vec::new();
    for &c in classes {
        let per: Option<Vec<f64>> = thresholds
            .iter()
            .map(|&t| oracle_class_ap(preds, gts, c, t))
            .collect();
        if let Some(per) = per {
            ap50s.push(per[0]);
            maps.push(per.iter().sum::<f64>() / per.len() as f64);
        }
    }
    if maps.is_empty() {
        return None;
    }
    let n = maps.len() as f64;
    Some((maps.iter().sum::<f64>() / n, ap50s.iter().sum::<f64>() / n))
}
