//! Supervised pretraining of the base detector on the pretraining split.

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError, Result};
use crate::bench::{compute_ap, ContinualTask, EvalSplit, GroundTruth, Prediction};
use crate::boxes::BBox;
use crate::detector::{
    matched_detection_loss, ClassSentence, DecoderOutput, Detector, ImageSample, LossBreakdown,
    LossWeights, MemoryVars, Vocab, Weights,
};
use crate::retrieval::nms;
use crate::tensor::{AdamW, AdamWConfig, Graph, SeededRng, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-image loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// AP and AP50 on the pretraining evaluation images.
    pub eval_ap: f64,
    pub eval_ap50: f64,
    pub num_params: usize,
}

/// Every word of every class name the benchmark can mention.
pub fn task_vocab() -> Vec<String> {
    Vocab::from_class_names(&ContinualTask::all_class_names()).words()[1..].to_vec()
}

/// Matched loss of the final output plus every auxiliary output.
pub(super) fn deep_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    boxes: &[BBox],
    classes: &[usize],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (mut loss, breakdown, _) = matched_detection_loss(g, out, boxes, classes, weights)?;
    for aux in &out.aux {
        let (l, _, _) = matched_detection_loss(g, aux, boxes, classes, weights)?;
        loss = g.add(loss, l)?;
    }
    Ok((loss, breakdown))
}

/// Class indices of an image's instances within `sentence`.
pub(super) fn gt_classes(image: &ImageSample, sentence: &ClassSentence) -> Result<Vec<usize>> {
    image
        .labels
        .iter()
        .map(|l| {
            sentence
                .class_index(l)
                .ok_or_else(|| ExperimentError::Data(format!("label `{l}` is not in the query")))
        })
        .collect()
}

/// AP of the memory-free base on `images` queried with `label_set`.
pub(super) fn base_ap(
    detector: &Detector,
    images: &[ImageSample],
    label_set: &[String],
    nms_iou: f64,
) -> Result<(f64, f64)> {
    let sentence = detector.sentence(label_set)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let enc = detector.encode_image(im)?;
        for d in nms(&detector.detect(&enc, &sentence, None)?, nms_iou) {
            preds.push(Prediction {
                image_id: i as u64,
                bbox: d.bbox,
                class_name: d.class_name,
                score: d.score,
            });
        }
        for (b, l) in im.boxes.iter().zip(&im.labels) {
            gts.push(GroundTruth {
                image_id: i as u64,
                bbox: *b,
                class_name: l.clone(),
            });
        }
    }
    Ok(compute_ap(&preds, &gts, label_set).map_or((0.0, 0.0), |r| (r.map, r.ap50)))
}

/// Query for one pretraining image: its classes plus randomly drawn absent
/// classes, shuffled.
fn pretrain_query(image: &ImageSample, label_set: &[String], rate: f64, rng: &mut SeededRng) -> Vec<String> {
    let mut names = image.labels.clone();
    names.sort();
    names.dedup();
    for c in label_set {
        if !names.contains(c) && rng.uniform() < rate {
            names.push(c.clone());
        }
    }
    rng.shuffle(&mut names);
    names
}

/// Train a fresh detector on the pretraining split, then freeze it. Fails
/// when the pretraining-split AP stays below the configured floor.
pub fn pretrain_base(
    config: &ExperimentConfig,
    task: &ContinualTask,
    log: &mut dyn FnMut(String),
) -> Result<(Detector, PretrainReport)> {
    let mut dcfg = config.detector.clone();
    if dcfg.vocab.is_empty() {
        dcfg.vocab = task_vocab();
    }
    let pc = &config.pretrain;
    let root = SeededRng::new(config.seed);
    let mut rng = root.fork(0x5052);
    let mut det = Detector::new(dcfg, &mut rng)?;
    let split = task.pretrain();
    let n = split.train.len();
    if n == 0 {
        return Err(ExperimentError::Data("the pretraining split is empty".into()));
    }
    let patches = split
        .train
        .iter()
        .map(|im| det.patchify(im))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: pc.lr,
        weight_decay: pc.weight_decay,
        horizon: pc.epochs * n,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(pc.epochs);
    for epoch in 0..pc.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let im = &split.train[i];
            let names = pretrain_query(im, &split.label_set, pc.negative_rate, &mut rng);
            let sentence = det.sentence(&names)?;
            let classes = gt_classes(im, &sentence)?;
            det.params_mut().zero_grads();
            let mut g = Graph::new();
            let mut w = Weights::new(det.params());
            let tokens = det.image_tokens(&mut g, &mut w, &patches[i])?;
            let out = det.forward(&mut g, &mut w, tokens, &sentence, &MemoryVars::none())?;
            let (loss, _) = deep_loss(&mut g, &out, &im.boxes, &classes, &config.loss)?;
            let value = g.data(loss)[0];
            if !value.is_finite() {
                return Err(ExperimentError::Numerical(format!(
                    "pretraining loss became {value} in epoch {}",
                    epoch + 1
                )));
            }
            total += value;
            g.backward(loss)?;
            let bound = w.into_bound();
            det.params_mut().accumulate_grads(&g, &bound)?;
            opt.step(det.params_mut())?;
        }
        curve.push(total / n as f64);
        log(format!("pretrain epoch {}/{} loss {:.4}", epoch + 1, pc.epochs, total / n as f64));
    }
    det.freeze();
    let (ap, ap50) = base_ap(
        &det,
        task.eval_images(EvalSplit::Pretrain),
        &split.label_set,
        config.retrieval.nms_iou,
    )?;
    log(format!("pretrain eval AP {ap:.4} AP50 {ap50:.4}"));
    if ap < pc.ap_floor {
        return Err(ExperimentError::PretrainFailure {
            floor: pc.ap_floor,
            reached: ap,
            curve,
        });
    }
    let report = PretrainReport {
        epoch_losses: curve,
        eval_ap: ap,
        eval_ap50: ap50,
        num_params: det.num_params(),
    };
    Ok((det, report))
}
