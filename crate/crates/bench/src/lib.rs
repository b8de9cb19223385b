//! Shared fixtures for the benchmarks.

use owcod_core::bench::{GroundTruth, Prediction};
use owcod_core::boxes::BBox;
use owcod_core::detector::{Detector, DetectorConfig, ImageSample};
use owcod_core::experiment::task_vocab;
use owcod_core::tensor::SeededRng;

/// Randomly initialized, frozen detector at the default configuration.
pub fn detector(seed: u64) -> Detector {
    let config = DetectorConfig {
        vocab: task_vocab(),
        ..Default::default()
    };
    let mut det = Detector::new(config, &mut SeededRng::new(seed)).expect("default config is valid");
    det.freeze();
    det
}

pub fn image(det: &Detector, seed: u64) -> ImageSample {
    let c = det.config();
    let side = c.image_grid.0 * c.patch_size;
    let mut rng = SeededRng::new(seed);
    let pixels = (0..side * side * 3).map(|_| rng.uniform()).collect();
    ImageSample::new(side, side, pixels).expect("pixel count matches")
}

fn random_box(rng: &mut SeededRng) -> BBox {
    BBox::new(rng.range(0.2, 0.8), rng.range(0.2, 0.8), rng.range(0.05, 0.3), rng.range(0.05, 0.3))
}

/// Predictions and ground truth over `images` images and `classes` classes.
pub fn scoring_set(images: u64, per_image: usize, classes: &[&str], seed: u64) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let mut rng = SeededRng::new(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for image_id in 1..=images {
        for _ in 0..per_image {
            let class_name = classes[rng.below(classes.len())].to_string();
            let bbox = random_box(&mut rng);
            gts.push(GroundTruth { image_id, bbox, class_name: class_name.clone() });
            let jitter = BBox::new(bbox.cx + rng.range(-0.03, 0.03), bbox.cy, bbox.w, bbox.h);
            preds.push(Prediction { image_id, bbox: jitter, class_name, score: rng.uniform() });
            preds.push(Prediction {
                image_id,
                bbox: random_box(&mut rng),
                class_name: classes[rng.below(classes.len())].to_string(),
                score: rng.uniform(),
            });
        }
    }
    (preds, gts)
}
