//! Procedural continual-detection benchmark: colored shapes on textured canvases.
//!
//! Each class is a (color, shape) pair named `"<color> <shape>"`. Every split
//! renders in its own visual domain (background, stripe texture, color cast),
//! so global image embeddings cluster by split.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{BenchError, Result};
use crate::boxes::{iou, BBox};
use crate::detector::ImageSample;
use crate::tensor::SeededRng;

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "bar"];
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.92, 0.12, 0.12]),
    ("green", [0.12, 0.78, 0.18]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.92, 0.1]),
    ("purple", [0.62, 0.15, 0.85]),
    ("white", [0.97, 0.97, 0.97]),
];
const PRETRAIN_DOMAINS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub seed: u64,
    pub subsets: usize,
    pub classes_per_subset: usize,
    pub shots: usize,
    pub eval_per_subset: usize,
    pub unseen_eval: usize,
    pub pretrain_train: usize,
    pub pretrain_eval: usize,
    pub max_instances: usize,
    pub image_size: (usize, usize),
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seed: 0,
            subsets: 6,
            classes_per_subset: 3,
            shots: 10,
            eval_per_subset: 16,
            unseen_eval: 24,
            pretrain_train: 480,
            pretrain_eval: 48,
            max_instances: 3,
            image_size: (48, 48),
        }
    }
}

/// Rendering style shared by every image of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub background: [f64; 3],
    pub texture: [f64; 3],
    pub frequency: (f64, f64),
    pub cast: [f64; 3],
    pub cast_strength: f64,
    pub noise: f64,
}

impl Domain {
    fn sample(rng: &mut SeededRng) -> Self {
        let mut rgb = |lo: f64, hi: f64| [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)];
        let background = rgb(0.05, 0.75);
        let texture = rgb(-0.12, 0.12);
        let cast = rgb(0.0, 1.0);
        Self {
            background,
            texture,
            frequency: (rng.range(0.02, 0.25), rng.range(0.02, 0.25)),
            cast,
            cast_strength: rng.range(0.15, 0.3),
            noise: 0.02,
        }
    }
}

/// One continual step's data.
#[derive(Debug, Clone)]
pub struct Subset {
    pub step: usize,
    pub label_set: Vec<String>,
    pub domain: Domain,
    pub train: Vec<ImageSample>,
    eval: Vec<ImageSample>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub label_set: Vec<String>,
    pub domains: Vec<Domain>,
    pub train: Vec<ImageSample>,
    eval: Vec<ImageSample>,
}

/// Which evaluation split to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalSplit {
    /// 1-based continual step.
    Subset(usize),
    Unseen,
    Pretrain,
}

/// Ordered few-shot subsets with disjoint label sets, an unseen split and a
/// pretraining split. Reads of evaluation images are counted.
#[derive(Debug)]
pub struct ContinualTask {
    pub params: TaskParams,
    subsets: Vec<Subset>,
    unseen: Split,
    pretrain: Split,
    eval_reads: AtomicUsize,
}

impl Clone for ContinualTask {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            subsets: self.subsets.clone(),
            unseen: self.unseen.clone(),
            pretrain: self.pretrain.clone(),
            eval_reads: AtomicUsize::new(self.eval_reads()),
        }
    }
}

impl ContinualTask {
    pub fn num_steps(&self) -> usize {
        self.subsets.len()
    }

    /// 1-based step lookup.
    pub fn subset(&self, step: usize) -> &Subset {
        &self.subsets[step - 1]
    }

    pub fn subsets(&self) -> &[Subset] {
        &self.subsets
    }

    pub fn unseen(&self) -> &Split {
        &self.unseen
    }

    pub fn pretrain(&self) -> &Split {
        &self.pretrain
    }

    pub fn eval_images(&self, split: EvalSplit) -> &[ImageSample] {
        self.eval_reads.fetch_add(1, Ordering::Relaxed);
        match split {
            EvalSplit::Subset(t) => &self.subsets[t - 1].eval,
            EvalSplit::Unseen => &self.unseen.eval,
            EvalSplit::Pretrain => &self.pretrain.eval,
        }
    }

    pub fn label_set(&self, split: EvalSplit) -> &[String] {
        match split {
            EvalSplit::Subset(t) => &self.subsets[t - 1].label_set,
            EvalSplit::Unseen => &self.unseen.label_set,
            EvalSplit::Pretrain => &self.pretrain.label_set,
        }
    }

    /// Number of evaluation-split reads so far.
    pub fn eval_reads(&self) -> usize {
        self.eval_reads.load(Ordering::Relaxed)
    }

    pub fn seen_classes(&self) -> Vec<String> {
        self.subsets.iter().flat_map(|s| s.label_set.clone()).collect()
    }

    /// Every class name the benchmark can mention.
    pub fn all_class_names() -> Vec<String> {
        PALETTE
            .iter()
            .flat_map(|(c, _)| SHAPES.iter().map(move |s| format!("{c} {s}")))
            .collect()
    }
}

fn class_name(color: usize, shape: usize) -> String {
    format!("{} {}", PALETTE[color].0, SHAPES[shape])
}

/// Classes on one "diagonal" of the color x shape grid; each diagonal covers every
/// color and every shape exactly once.
fn diagonal(k: usize) -> Vec<(usize, usize)> {
    (0..SHAPES.len()).map(|s| ((s + k) % PALETTE.len(), s)).collect()
}

/// Whether box-local coordinates `(u, v)` in `[-1, 1]^2` fall inside the shape.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    match SHAPES[shape] {
        "circle" => u * u + v * v <= 1.0,
        "square" | "bar" => u.abs() <= 1.0 && v.abs() <= 1.0,
        "triangle" => (-1.0..=1.0).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
        "cross" => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        "ring" => {
            let r = u * u + v * v;
            (0.36..=1.0).contains(&r)
        }
        _ => false,
    }
}

struct Instance {
    color: usize,
    shape: usize,
    bbox: BBox,
}

fn render(
    rng: &mut SeededRng,
    domain: &Domain,
    size: (usize, usize),
    instances: &[Instance],
) -> Vec<f64> {
    let (h, w) = size;
    let phase = rng.range(0.0, std::f64::consts::TAU);
    let mut px = vec![0.0; h * w * 3];
    const SS: usize = 3;
    for y in 0..h {
        for x in 0..w {
            let wave = (std::f64::consts::TAU
                * (domain.frequency.0 * x as f64 + domain.frequency.1 * y as f64)
                + phase)
                .sin();
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = domain.background[c] + domain.texture[c] * wave;
            }
            for inst in instances {
                let [x1, y1, x2, y2] = inst.bbox.xyxy();
                let (fx1, fy1) = (x1 * w as f64, y1 * h as f64);
                let (fx2, fy2) = (x2 * w as f64, y2 * h as f64);
                if (x + 1) as f64 <= fx1 || x as f64 >= fx2 || (y + 1) as f64 <= fy1 || y as f64 >= fy2 {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px_ = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py_ = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let u = 2.0 * (px_ - fx1) / (fx2 - fx1) - 1.0;
                        let v = 2.0 * (py_ - fy1) / (fy2 - fy1) - 1.0;
                        if inside(inst.shape, u, v) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f64 / (SS * SS) as f64;
                for c in 0..3 {
                    rgb[c] = (1.0 - cov) * rgb[c] + cov * PALETTE[inst.color].1[c];
                }
            }
            for c in 0..3 {
                let cast = (1.0 - domain.cast_strength) * rgb[c] + domain.cast_strength * domain.cast[c];
                let v = cast + rng.normal(0.0, domain.noise);
                px[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    px
}

fn place(rng: &mut SeededRng, shape: usize, placed: &[BBox]) -> BBox {
    let mut best = None;
    for _ in 0..64 {
        let s = rng.range(0.22, 0.42);
        let (bw, bh) = if SHAPES[shape] == "bar" {
            if rng.uniform() < 0.5 {
                (s * 1.3, s * 0.4)
            } else {
                (s * 0.4, s * 1.3)
            }
        } else {
            (s, s)
        };
        let cx = rng.range(bw / 2.0, 1.0 - bw / 2.0);
        let cy = rng.range(bh / 2.0, 1.0 - bh / 2.0);
        let b = BBox::new(cx, cy, bw, bh);
        let overlap = placed.iter().map(|p| iou(p, &b)).fold(0.0, f64::max);
        if overlap <= 0.05 {
            return b;
        }
        if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
            best = Some((overlap, b));
        }
    }
    best.expect("at least one placement attempt").1
}

/// One image containing `primary` plus up to `max_instances - 1` extra instances
/// drawn from `classes`.
fn make_image(
    rng: &mut SeededRng,
    params: &TaskParams,
    domain: &Domain,
    classes: &[(usize, usize)],
    primary: Option<(usize, usize)>,
) -> Result<ImageSample> {
    let max = params.max_instances.max(1);
    let n = 1 + rng.below(max);
    let mut chosen = Vec::with_capacity(n);
    if let Some(p) = primary {
        chosen.push(p);
    }
    while chosen.len() < n {
        chosen.push(classes[rng.below(classes.len())]);
    }
    let mut instances: Vec<Instance> = Vec::with_capacity(n);
    for (color, shape) in chosen {
        let placed: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
        let bbox = place(rng, shape, &placed);
        instances.push(Instance { color, shape, bbox });
    }
    let px = render(rng, domain, params.image_size, &instances);
    let (h, w) = params.image_size;
    let boxes = instances.iter().map(|i| i.bbox).collect();
    let labels = instances.iter().map(|i| class_name(i.color, i.shape)).collect();
    ImageSample::new(h, w, px)
        .and_then(|s| s.with_annotations(boxes, labels))
        .map_err(|e| BenchError::Generation(e.to_string()))
}

fn names(classes: &[(usize, usize)]) -> Vec<String> {
    classes.iter().map(|&(c, s)| class_name(c, s)).collect()
}

/// Deterministic synthetic continual task.
pub fn generate_synthetic_task(params: &TaskParams) -> Result<ContinualTask> {
    if params.subsets == 0
        || params.classes_per_subset == 0
        || params.shots == 0
        || params.eval_per_subset == 0
        || params.max_instances == 0
    {
        return Err(BenchError::Config("task parameters must be positive".into()));
    }
    // Diagonals 0-1 pretrain, 2 unseen, 3-5 continual.
    let mut pool: Vec<(usize, usize)> = (3..6).flat_map(diagonal).collect();
    let budget = params.subsets * params.classes_per_subset;
    if budget > pool.len() {
        return Err(BenchError::Config(format!(
            "{budget} continual classes requested but only {} (shape, color) pairs remain",
            pool.len()
        )));
    }
    let mut rng = SeededRng::new(params.seed);
    let mut class_rng = rng.split();
    let mut domain_rng = rng.split();
    let mut image_rng = rng.split();
    class_rng.shuffle(&mut pool);

    let pretrain_classes: Vec<(usize, usize)> = (0..2).flat_map(diagonal).collect();
    let unseen_classes = diagonal(2);
    let pretrain_domains: Vec<Domain> = (0..PRETRAIN_DOMAINS).map(|_| Domain::sample(&mut domain_rng)).collect();
    let unseen_domain = Domain::sample(&mut domain_rng);

    let mut subsets = Vec::with_capacity(params.subsets);
    for t in 0..params.subsets {
        let classes = &pool[t * params.classes_per_subset..(t + 1) * params.classes_per_subset];
        let domain = Domain::sample(&mut domain_rng);
        let mut train = Vec::with_capacity(params.shots * classes.len());
        for &k in classes {
            for _ in 0..params.shots {
                train.push(make_image(&mut image_rng, params, &domain, classes, Some(k))?);
            }
        }
        let eval = (0..params.eval_per_subset)
            .map(|_| make_image(&mut image_rng, params, &domain, classes, None))
            .collect::<Result<_>>()?;
        subsets.push(Subset {
            step: t + 1,
            label_set: names(classes),
            domain,
            train,
            eval,
        });
    }

    let unseen_eval = (0..params.unseen_eval)
        .map(|_| make_image(&mut image_rng, params, &unseen_domain, &unseen_classes, None))
        .collect::<Result<_>>()?;
    let unseen = Split {
        label_set: names(&unseen_classes),
        domains: vec![unseen_domain],
        train: Vec::new(),
        eval: unseen_eval,
    };

    let mut pre_img = |i: usize| {
        let d = &pretrain_domains[i % PRETRAIN_DOMAINS];
        make_image(&mut image_rng, params, d, &pretrain_classes, None)
    };
    let pre_train = (0..params.pretrain_train).map(&mut pre_img).collect::<Result<_>>()?;
    let pre_eval = (0..params.pretrain_eval).map(&mut pre_img).collect::<Result<_>>()?;
    let pretrain = Split {
        label_set: names(&pretrain_classes),
        domains: pretrain_domains,
        train: pre_train,
        eval: pre_eval,
    };

    Ok(ContinualTask {
        params: params.clone(),
        subsets,
        unseen,
        pretrain,
        eval_reads: AtomicUsize::new(0),
    })
}
