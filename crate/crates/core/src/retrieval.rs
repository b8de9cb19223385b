//! Prototype-threshold retrieval over the memory pool, multi-memory inference
//! merged by class-wise NMS, and an oracle retrieval mode.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::iou;
use crate::detector::{Detection, Detector, DetectorError, EncodedImage};
use crate::memory::{MemoryError, MemoryPool, MemoryTriplet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub threshold: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.89,
            nms_iou: 0.5,
            score_floor: 0.0,
        }
    }
}

impl RetrievalConfig {
    /// Thresholds above one are accepted and always fall back.
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < -1.0 {
            return Err(RetrievalError::Config(format!(
                "threshold {} must be at least -1",
                self.threshold
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(RetrievalError::Config(format!(
                "NMS IoU threshold {} must lie in (0, 1)",
                self.nms_iou
            )));
        }
        Ok(())
    }
}

/// Retrieved steps (1-based, ascending) with every step's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub retrieved: Vec<usize>,
    /// `(step, score)` for every triplet in the pool.
    pub scores: Vec<(usize, f64)>,
    pub fallback: bool,
}

impl RetrievalOutcome {
    fn from_retrieved(retrieved: Vec<usize>, scores: Vec<(usize, f64)>) -> Self {
        let fallback = retrieved.is_empty();
        Self {
            retrieved,
            scores,
            fallback,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Best cosine similarity between `global` and any prototype of the triplet.
pub fn step_score(global: &[f64], triplet: &MemoryTriplet) -> f64 {
    triplet
        .prototypes
        .iter()
        .map(|p| cosine(global, p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Every step whose score reaches the threshold; empty means fall back to the base.
pub fn retrieve(global: &[f64], pool: &MemoryPool, config: &RetrievalConfig) -> RetrievalOutcome {
    let scores: Vec<(usize, f64)> = pool
        .triplets()
        .iter()
        .map(|t| (t.step, step_score(global, t)))
        .collect();
    let retrieved = scores
        .iter()
        .filter(|(_, s)| *s >= config.threshold)
        .map(|(t, _)| *t)
        .collect();
    RetrievalOutcome::from_retrieved(retrieved, scores)
}

/// Retrieval with the known subset of the image; `None` marks an unseen image.
pub fn oracle_retrieve(step: Option<usize>, pool: &MemoryPool) -> Result<RetrievalOutcome> {
    let scores = Vec::new();
    match step {
        None => Ok(RetrievalOutcome::from_retrieved(Vec::new(), scores)),
        Some(t) if pool.step(t).is_some() => Ok(RetrievalOutcome::from_retrieved(vec![t], scores)),
        Some(t) => Err(RetrievalError::Input(format!(
            "step {t} is not in the pool of {} steps",
            pool.len()
        ))),
    }
}

/// Greedy class-wise suppression. Candidates are visited by descending score,
/// then ascending box area, then input order; the result keeps that order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(Ordering::Equal)
            .then(da.bbox.area().partial_cmp(&db.bbox.area()).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        let clash = kept
            .iter()
            .any(|k| k.class_name == d.class_name && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !clash {
            kept.push(d.clone());
        }
    }
    kept
}

/// Detections for an encoded image under a retrieval outcome. A fallback runs
/// the frozen base with `fallback_labels`; otherwise every retrieved triplet
/// runs with its own memories and label set, and the union is suppressed.
pub fn infer_with_outcome(
    detector: &Detector,
    encoded: &EncodedImage,
    pool: &MemoryPool,
    outcome: &RetrievalOutcome,
    fallback_labels: &[String],
    config: &RetrievalConfig,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    if outcome.fallback {
        let sentence = detector.sentence(fallback_labels)?;
        all = detector.detect(encoded, &sentence, None)?;
    } else {
        for &t in &outcome.retrieved {
            let triplet = pool
                .step(t)
                .ok_or_else(|| RetrievalError::Input(format!("step {t} is not in the pool")))?;
            let sentence = detector.sentence(&triplet.label_set)?;
            let store = triplet.memories.to_store(false, false);
            all.extend(detector.detect(encoded, &sentence, Some(&store))?);
        }
    }
    Ok(nms(&all, config.nms_iou)
        .into_iter()
        .filter(|d| d.score >= config.score_floor)
        .collect())
}

/// Threshold retrieval followed by inference.
pub fn infer(
    detector: &Detector,
    encoded: &EncodedImage,
    pool: &MemoryPool,
    fallback_labels: &[String],
    config: &RetrievalConfig,
) -> Result<(Vec<Detection>, RetrievalOutcome)> {
    let outcome = retrieve(&encoded.global, pool, config);
    let dets = infer_with_outcome(detector, encoded, pool, &outcome, fallback_labels, config)?;
    Ok((dets, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn det(x1: f64, x2: f64, score: f64, class: &str) -> Detection {
        Detection {
            bbox: BBox::from_xyxy(x1, 0.0, x2, 1.0),
            class_name: class.into(),
            score,
        }
    }

    #[test]
    fn nms_drops_duplicates_keeps_disjoint() {
        let out = nms(&[det(0.0, 0.5, 0.8, "a"), det(0.0, 0.5, 0.9, "a")], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let out = nms(&[det(0.0, 0.5, 0.9, "a"), det(0.45, 0.95, 0.8, "a")], 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_is_class_wise() {
        let out = nms(&[det(0.0, 0.5, 0.9, "a"), det(0.0, 0.5, 0.8, "b")], 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_prefers_smaller_box_on_tied_score() {
        let out = nms(&[det(0.0, 0.6, 0.5, "a"), det(0.0, 0.5, 0.5, "a")], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::from_xyxy(0.0, 0.0, 0.5, 1.0));
    }

    #[test]
    fn cosine_handles_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig {
            nms_iou: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let low = RetrievalConfig {
            threshold: -1.5,
            ..Default::default()
        };
        assert!(low.validate().is_err());
    }
}
