//! COCO-style average precision: greedy score-ordered matching, 101-point
//! interpolated precision, averaged over IoU thresholds 0.50:0.05:0.95.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};

pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Mean over IoU thresholds and GT-present classes.
    pub map: f64,
    /// Mean over GT-present classes at IoU 0.5.
    pub ap50: f64,
    /// Per-class AP averaged over IoU thresholds.
    pub per_class: BTreeMap<String, f64>,
}

/// True-positive flags of score-ordered predictions for one class at one IoU
/// threshold. Each prediction claims the unmatched same-image GT of highest
/// IoU, provided that IoU reaches the threshold.
pub fn match_flags(preds: &[&Prediction], gts: &[&GroundTruth], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] || gt.image_id != p.image_id {
                    continue;
                }
                let o = iou(&p.bbox, &gt.bbox);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from TP flags in score order.
pub fn interpolated_ap(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn sorted_by_score<'a>(preds: impl Iterator<Item = &'a Prediction>) -> Vec<&'a Prediction> {
    let mut v: Vec<&Prediction> = preds.collect();
    // Stable: equal scores keep input order.
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

/// AP over `classes`, averaged over the classes that have at least one GT.
/// Returns `None` when no class in the set has GT.
pub fn compute_ap<S: AsRef<str>>(
    preds: &[Prediction],
    gts: &[GroundTruth],
    classes: &[S],
) -> Option<ApResult> {
    let class_set: BTreeSet<&str> = classes.iter().map(AsRef::as_ref).collect();
    let thresholds = iou_thresholds();
    let mut per_class = BTreeMap::new();
    let mut ap50_sum = 0.0;
    for &c in &class_set {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_name == c).collect();
        if cg.is_empty() {
            continue;
        }
        let cp = sorted_by_score(preds.iter().filter(|p| p.class_name == c));
        let mut acc = 0.0;
        for (i, &t) in thresholds.iter().enumerate() {
            let ap = interpolated_ap(&match_flags(&cp, &cg, t), cg.len());
            if i == 0 {
                ap50_sum += ap;
            }
            acc += ap;
        }
        per_class.insert(c.to_string(), acc / thresholds.len() as f64);
    }
    if per_class.is_empty() {
        return None;
    }
    let n = per_class.len() as f64;
    Some(ApResult {
        map: per_class.values().sum::<f64>() / n,
        ap50: ap50_sum / n,
        per_class,
    })
}
