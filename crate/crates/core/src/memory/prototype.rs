use serde::{Deserialize, Serialize};

use super::{MemoryError, Result};
use crate::boxes::BBox;
use crate::detector::{Detector, ImageSample};
use crate::tensor::SeededRng;

/// Instance-crop augmentation used to build class prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrototypeConfig {
    pub n_crops: usize,
    /// Relative box enlargement of the first crop of every instance.
    pub margin: f64,
    /// Half-width of the uniform jitter on the margin of repeated crops.
    pub jitter: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            n_crops: 8,
            margin: 0.2,
            jitter: 0.1,
        }
    }
}

/// Crop the region `bbox` (normalized, clamped to the image) and resample it
/// bilinearly to `out_h x out_w`.
pub fn crop_resize(image: &ImageSample, bbox: &BBox, out_h: usize, out_w: usize) -> ImageSample {
    let [x1, y1, x2, y2] = bbox.xyxy();
    let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
    let (x2, y2) = (x2.clamp(x1, 1.0), y2.clamp(y1, 1.0));
    let (h, w) = (image.height as f64, image.width as f64);
    let sample = |y: f64, x: f64, c: usize| {
        let y = y.clamp(0.0, h - 1.0);
        let x = x.clamp(0.0, w - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1_, x1_) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = image.pixel(y0, x0, c) * (1.0 - fx) + image.pixel(y0, x1_, c) * fx;
        let bot = image.pixel(y1_, x0, c) * (1.0 - fx) + image.pixel(y1_, x1_, c) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut px = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let sy = (y1 + (oy as f64 + 0.5) / out_h as f64 * (y2 - y1)) * h - 0.5;
        for ox in 0..out_w {
            let sx = (x1 + (ox as f64 + 0.5) / out_w as f64 * (x2 - x1)) * w - 0.5;
            for c in 0..3 {
                px.push(sample(sy, sx, c));
            }
        }
    }
    ImageSample::new(out_h, out_w, px).expect("buffer sized to the output")
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// One unit prototype per class of `label_set`: the normalized mean global
/// embedding of `n_crops` instance crops. Crop `j` uses instance
/// `j mod n_instances`; the first pass over the instances uses the base
/// margin and later passes a jittered one.
pub fn build_prototypes<S: AsRef<str>>(
    detector: &Detector,
    images: &[ImageSample],
    label_set: &[S],
    config: &PrototypeConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    if config.n_crops == 0 {
        return Err(MemoryError::Invalid("n_crops must be positive".into()));
    }
    let (oh, ow) = detector.config().image_size();
    let d = detector.config().d_model;
    let mut out = Vec::with_capacity(label_set.len());
    for class in label_set {
        let class = class.as_ref();
        let instances: Vec<(&ImageSample, BBox)> = images
            .iter()
            .flat_map(|im| {
                im.boxes
                    .iter()
                    .zip(&im.labels)
                    .filter(|(_, l)| l.as_str() == class)
                    .map(move |(b, _)| (im, *b))
            })
            .collect();
        if instances.is_empty() {
            return Err(MemoryError::Integrity(format!(
                "class `{class}` has no training instance"
            )));
        }
        let mut acc = vec![0.0; d];
        for j in 0..config.n_crops {
            let (im, b) = instances[j % instances.len()];
            let m = if j < instances.len() {
                config.margin
            } else {
                config.margin + rng.range(-config.jitter, config.jitter)
            };
            let grown = BBox::new(b.cx, b.cy, b.w * (1.0 + m), b.h * (1.0 + m));
            let crop = crop_resize(im, &grown, oh, ow);
            let e = detector.encode_image(&crop)?;
            acc.iter_mut().zip(&e.global).for_each(|(a, g)| *a += g);
        }
        out.push(unit(acc.into_iter().map(|v| v / config.n_crops as f64).collect()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_box_crop_is_identity() {
        let px: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 / 48.0).collect();
        let im = ImageSample::new(4, 4, px.clone()).unwrap();
        let c = crop_resize(&im, &BBox::new(0.5, 0.5, 1.0, 1.0), 4, 4);
        for (a, b) in c.pixels.iter().zip(&px) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let im = ImageSample::new(6, 6, vec![0.3; 108]).unwrap();
        let c = crop_resize(&im, &BBox::new(0.4, 0.6, 0.3, 0.5), 5, 7);
        assert!(c.pixels.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
