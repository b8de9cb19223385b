//! Evaluation of a pool under the four inference modes, with the per-step AP
//! matrix computed from pool prefixes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::bench::{aggregate, compute_ap, ContinualTask, EvalReport, EvalSplit, GroundTruth, Prediction, ReportInput};
use crate::detector::{Detection, Detector, EncodedImage, ImageSample};
use crate::memory::MemoryPool;
use crate::retrieval::{infer_with_outcome, nms, oracle_retrieve, retrieve, RetrievalConfig, RetrievalOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Prototype-similarity retrieval with fallback to the base.
    Threshold,
    /// Each image uses the triplet of its own subset; unseen images fall back.
    Oracle,
    /// The base alone, queried with the evaluated split's class names.
    ZeroShot,
    /// The most recent triplet on every image, queried with the split's class names.
    NoRetrievalLastTriplet,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [
        EvalMode::Threshold,
        EvalMode::Oracle,
        EvalMode::ZeroShot,
        EvalMode::NoRetrievalLastTriplet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Threshold => "threshold",
            EvalMode::Oracle => "oracle",
            EvalMode::ZeroShot => "zero-shot",
            EvalMode::NoRetrievalLastTriplet => "no-retrieval-last-triplet",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown evaluation mode `{s}`")))
    }
}

/// Final-pool predictions of one split together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    /// `S1`..`ST` or `unseen`.
    pub split: String,
    pub label_set: Vec<String>,
    pub images: Vec<ImageSample>,
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<GroundTruth>,
    /// Fraction of images whose retrieval came back empty.
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub report: EvalReport,
    /// Seen subsets in step order, then the unseen split.
    pub splits: Vec<SplitPredictions>,
}

impl Evaluation {
    pub fn unseen(&self) -> &SplitPredictions {
        self.splits.last().expect("the unseen split is always evaluated")
    }
}

struct EvalSet<'a> {
    name: String,
    /// Subset step, `None` for the unseen split.
    step: Option<usize>,
    label_set: &'a [String],
    images: &'a [ImageSample],
    encoded: Vec<EncodedImage>,
}

fn check_pool(pool: &MemoryPool, base: &Detector, task: &ContinualTask) -> Result<()> {
    let mismatch = |m: String| Err(ExperimentError::Data(m));
    if pool.len() != task.num_steps() {
        return mismatch(format!("pool holds {} steps, the task has {}", pool.len(), task.num_steps()));
    }
    for (t, s) in pool.triplets().iter().zip(task.subsets()) {
        if t.step != s.step || t.label_set != s.label_set {
            return mismatch(format!("pool step {} does not match the task's subset", t.step));
        }
    }
    let (p, b) = (pool.config(), base.config());
    if p.d_model != b.d_model || p.fusion_layers != b.fusion_layers || p.tie_qk != b.tie_qk || p.vocab != b.vocab {
        return mismatch("pool and base detector configurations differ".into());
    }
    Ok(())
}

fn prefix(pool: &MemoryPool, t: usize) -> Result<MemoryPool> {
    let mut p = MemoryPool::new(pool.config().clone());
    for trip in &pool.triplets()[..t] {
        p.memorize(trip.clone())?;
    }
    Ok(p)
}

/// Detections for one image and whether the base fallback was taken.
fn infer_image(
    mode: EvalMode,
    base: &Detector,
    enc: &EncodedImage,
    set: &EvalSet,
    pool: &MemoryPool,
    cfg: &RetrievalConfig,
) -> Result<(Vec<Detection>, bool)> {
    let outcome = match mode {
        EvalMode::Threshold => retrieve(&enc.global, pool, cfg),
        EvalMode::Oracle => oracle_retrieve(set.step, pool)?,
        EvalMode::ZeroShot => RetrievalOutcome {
            retrieved: Vec::new(),
            scores: Vec::new(),
            fallback: true,
        },
        EvalMode::NoRetrievalLastTriplet => {
            let last = pool
                .last()
                .ok_or_else(|| ExperimentError::Data("the pool is empty".into()))?;
            let sentence = base.sentence(set.label_set)?;
            let store = last.memories.to_store(false, false);
            let dets = nms(&base.detect(enc, &sentence, Some(&store))?, cfg.nms_iou)
                .into_iter()
                .filter(|d| d.score >= cfg.score_floor)
                .collect();
            return Ok((dets, false));
        }
    };
    let dets = infer_with_outcome(base, enc, pool, &outcome, set.label_set, cfg)?;
    Ok((dets, outcome.fallback))
}

fn ground_truth(images: &[ImageSample]) -> Vec<GroundTruth> {
    images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| {
            im.boxes.iter().zip(&im.labels).map(move |(b, l)| GroundTruth {
                image_id: i as u64 + 1,
                bbox: *b,
                class_name: l.clone(),
            })
        })
        .collect()
}

/// Predictions, AP and fallback rate of one split under one pool.
fn score_split(
    mode: EvalMode,
    base: &Detector,
    set: &EvalSet,
    pool: &MemoryPool,
    cfg: &RetrievalConfig,
) -> Result<(Vec<Prediction>, f64, f64)> {
    let mut preds = Vec::new();
    let mut fallbacks = 0usize;
    for (i, enc) in set.encoded.iter().enumerate() {
        let (dets, fell_back) = infer_image(mode, base, enc, set, pool, cfg)?;
        fallbacks += usize::from(fell_back);
        preds.extend(dets.into_iter().map(|d| Prediction {
            image_id: i as u64 + 1,
            bbox: d.bbox,
            class_name: d.class_name,
            score: d.score,
        }));
    }
    let ap = compute_ap(&preds, &ground_truth(set.images), set.label_set).map_or(0.0, |r| r.map);
    let rate = fallbacks as f64 / set.encoded.len().max(1) as f64;
    Ok((preds, ap, rate))
}

/// AP of subset `step` under a pool holding at least `step` triplets, such as
/// the partial pool seen between training steps.
pub fn subset_ap(
    pool: &MemoryPool,
    base: &Detector,
    task: &ContinualTask,
    step: usize,
    mode: EvalMode,
    cfg: &RetrievalConfig,
) -> Result<f64> {
    cfg.validate()?;
    if step == 0 || step > task.num_steps() || pool.len() < step {
        return Err(ExperimentError::Data(format!(
            "subset {step} is not covered by a pool of {} steps",
            pool.len()
        )));
    }
    let split = EvalSplit::Subset(step);
    let images = task.eval_images(split);
    let encoded = images
        .iter()
        .map(|im| base.encode_image(im))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let set = EvalSet {
        name: format!("S{step}"),
        step: Some(step),
        label_set: task.label_set(split),
        images,
        encoded,
    };
    Ok(score_split(mode, base, &set, pool, cfg)?.1)
}

/// Evaluate `pool` on every seen subset and the unseen split. Row `t` of the
/// AP matrix uses the first `t` triplets only, so the diagonal is each
/// subset's AP right after its own step. Zero-shot mode never touches the pool.
pub fn evaluate(
    pool: &MemoryPool,
    base: &Detector,
    task: &ContinualTask,
    mode: EvalMode,
    cfg: &RetrievalConfig,
    method: &str,
) -> Result<Evaluation> {
    cfg.validate()?;
    if mode != EvalMode::ZeroShot {
        check_pool(pool, base, task)?;
    }
    let t_max = task.num_steps();
    let mut sets = Vec::with_capacity(t_max + 1);
    let mut splits: Vec<(String, Option<usize>, EvalSplit)> =
        (1..=t_max).map(|t| (format!("S{t}"), Some(t), EvalSplit::Subset(t))).collect();
    splits.push(("unseen".into(), None, EvalSplit::Unseen));
    for (name, step, split) in splits {
        let images = task.eval_images(split);
        let encoded = images
            .iter()
            .map(|im| base.encode_image(im))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sets.push(EvalSet {
            name,
            step,
            label_set: task.label_set(split),
            images,
            encoded,
        });
    }
    let empty = MemoryPool::new(base.config().clone());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t_max);
    let mut last_preds = Vec::new();
    for t in 1..=t_max {
        let row = if mode == EvalMode::ZeroShot && t > 1 {
            rows[0].clone()
        } else {
            let p = if mode == EvalMode::ZeroShot { empty.clone() } else { prefix(pool, t)? };
            let upto = if mode == EvalMode::ZeroShot { t_max } else { t };
            let mut row = Vec::with_capacity(upto);
            for set in &sets[..upto] {
                let (preds, ap, rate) = score_split(mode, base, set, &p, cfg)?;
                row.push(ap);
                if t == t_max || mode == EvalMode::ZeroShot {
                    last_preds.push((preds, rate));
                }
            }
            row
        };
        rows.push(row);
    }
    let final_pool = if mode == EvalMode::ZeroShot { empty } else { prefix(pool, t_max)? };
    let unseen = &sets[t_max];
    let (unseen_preds, unseen_ap, unseen_rate) = score_split(mode, base, unseen, &final_pool, cfg)?;
    last_preds.push((unseen_preds, unseen_rate));
    let added_params = if mode == EvalMode::ZeroShot {
        vec![0; t_max]
    } else {
        pool.added_params().0
    };
    let report = aggregate(&ReportInput {
        method: method.to_string(),
        num_steps: t_max,
        step_rows: rows,
        unseen_ap: Some(unseen_ap),
        added_params,
    })?;
    let splits = sets
        .iter()
        .zip(last_preds)
        .map(|(set, (predictions, fallback_rate))| SplitPredictions {
            split: set.name.clone(),
            label_set: set.label_set.to_vec(),
            images: set.images.to_vec(),
            predictions,
            ground_truth: ground_truth(set.images),
            fallback_rate,
        })
        .collect();
    Ok(Evaluation { mode, report, splits })
}
