//! Sequential per-step memory training, grid search and memorization.

use serde::{Deserialize, Serialize};

use super::pretrain::{deep_loss, gt_classes};
use super::{ExperimentConfig, ExperimentError, Result, TrainingMode};
use crate::bench::{ContinualTask, Subset};
use crate::boxes::BBox;
use crate::detector::{ClassSentence, Detector, DetectorConfig, MemoryVars, TextFeatures, Weights};
use crate::memory::{build_prototypes, init_step_memories, MemoryPool, MemoryTriplet, StepMemories};
use crate::tensor::{AdamW, AdamWConfig, Graph, SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub epochs: usize,
    /// Mean train loss of the final epoch; `None` when training diverged.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    /// `concept`, `interaction` or `joint`.
    pub stage: String,
    pub lr: f64,
    pub epochs: usize,
    /// Mean train loss of every epoch of the chosen run.
    pub curve: Vec<f64>,
    /// Every examined grid cell, in examination order; empty without a grid search.
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stages: Vec<StageLog>,
    pub added_params: usize,
    pub triplet_digest: String,
}

#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub pool: MemoryPool,
    pub steps: Vec<StepLog>,
}

/// One training image with its encoder tokens cached.
struct Sample {
    tokens: Tensor,
    boxes: Vec<BBox>,
    classes: Vec<usize>,
}

struct StepData {
    sentence: ClassSentence,
    samples: Vec<Sample>,
}

#[derive(Clone, Copy)]
struct Stage {
    name: &'static str,
    concept: bool,
    interaction: bool,
}

/// Stage plan for a training mode; stages without parameters are skipped.
fn stages(mode: TrainingMode, cfg: &DetectorConfig) -> Vec<Stage> {
    let has_con = cfg.prompt_length > 0;
    let has_inc = cfg.lora_layers > 0;
    let all = match mode {
        TrainingMode::Decoupled => vec![
            Stage { name: "concept", concept: true, interaction: false },
            Stage { name: "interaction", concept: false, interaction: true },
        ],
        TrainingMode::Joint => vec![Stage { name: "joint", concept: true, interaction: true }],
    };
    all.into_iter()
        .map(|s| Stage {
            concept: s.concept && has_con,
            interaction: s.interaction && has_inc,
            ..s
        })
        .filter(|s| s.concept || s.interaction)
        .collect()
}

/// Train one stage from `start` and return the memories and per-epoch losses.
/// A non-finite loss aborts with a numerical error.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    base: &Detector,
    cfg: &DetectorConfig,
    data: &StepData,
    start: &StepMemories,
    stage: Stage,
    lr: f64,
    epochs: usize,
    config: &ExperimentConfig,
    mut rng: SeededRng,
) -> Result<(StepMemories, Vec<f64>)> {
    let mut store = start.to_store(stage.concept, stage.interaction);
    let batch = config.schedule.batch_size;
    let n = data.samples.len();
    let per_epoch = n.div_ceil(batch);
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: config.schedule.weight_decay,
        horizon: epochs * per_epoch,
        ..Default::default()
    });
    // With the prompt frozen the text stream does not depend on trainable
    // parameters, so it is encoded once.
    let cached_text = if stage.concept {
        None
    } else {
        let mut g = Graph::new();
        let mem = MemoryVars::from_store(&mut g, &store, cfg)?;
        let mut w = Weights::new(base.params());
        let t = base.encode_text(&mut g, &mut w, &data.sentence, mem.prompt)?;
        Some((g.value(t.tokens), t.prompt_len))
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            store.zero_grads();
            for &i in chunk {
                let s = &data.samples[i];
                let mut g = Graph::new();
                let bound = store.bind(&mut g);
                let mem = MemoryVars::from_bound(&mut g, &bound, cfg)?;
                let mut w = Weights::new(base.params());
                let image = g.leaf(&s.tokens);
                let text = match &cached_text {
                    Some((t, p)) => TextFeatures {
                        tokens: g.leaf(t),
                        prompt_len: *p,
                    },
                    None => base.encode_text(&mut g, &mut w, &data.sentence, mem.prompt)?,
                };
                let out = base.forward_with_text(&mut g, &mut w, image, text, &data.sentence, &mem)?;
                let (loss, _) = deep_loss(&mut g, &out, &s.boxes, &s.classes, &config.loss)?;
                let value = g.data(loss)[0];
                if !value.is_finite() {
                    return Err(ExperimentError::Numerical(format!(
                        "{} stage loss became {value} in epoch {} (lr {lr})",
                        stage.name,
                        epoch + 1
                    )));
                }
                total += value;
                let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                g.backward(scaled)?;
                store.accumulate_grads(&g, &bound)?;
            }
            opt.step(&mut store)?;
        }
        curve.push(total / n as f64);
    }
    if store.iter().any(|(_, t)| !t.is_finite()) {
        return Err(ExperimentError::Numerical(format!(
            "{} stage produced non-finite memories (lr {lr})",
            stage.name
        )));
    }
    Ok((StepMemories::from_store(&store, cfg)?, curve))
}

fn step_data(base: &Detector, subset: &Subset) -> Result<StepData> {
    let sentence = base.sentence(&subset.label_set)?;
    let samples = subset
        .train
        .iter()
        .map(|im| {
            Ok(Sample {
                tokens: base.encode_image(im)?.tokens,
                boxes: im.boxes.clone(),
                classes: gt_classes(im, &sentence)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(ExperimentError::Data(format!("step {} has no training images", subset.step)));
    }
    Ok(StepData { sentence, samples })
}

/// Learn one step's memories starting from `start`.
pub fn train_step(
    base: &Detector,
    cfg: &DetectorConfig,
    subset: &Subset,
    start: StepMemories,
    config: &ExperimentConfig,
    rng: &mut SeededRng,
) -> Result<(StepMemories, Vec<StageLog>)> {
    let data = step_data(base, subset)?;
    let sched = &config.schedule;
    let mut memories = start;
    let mut logs = Vec::new();
    for (si, stage) in stages(config.mode, cfg).into_iter().enumerate() {
        let stage_rng = rng.fork(si as u64);
        if !sched.grid_search {
            let (m, curve) = run_stage(
                base, cfg, &data, &memories, stage, sched.fixed_lr, sched.fixed_epochs, config, stage_rng,
            )?;
            memories = m;
            logs.push(StageLog {
                stage: stage.name.into(),
                lr: sched.fixed_lr,
                epochs: sched.fixed_epochs,
                curve,
                grid: Vec::new(),
            });
            continue;
        }
        let mut grid = Vec::new();
        let mut best: Option<(f64, StepMemories, Vec<f64>, f64, usize)> = None;
        for &lr in &sched.lr_candidates {
            for &epochs in &sched.epoch_candidates {
                let outcome = run_stage(
                    base, cfg, &data, &memories, stage, lr, epochs, config, stage_rng.clone(),
                );
                let (m, curve) = match outcome {
                    Ok(v) => v,
                    Err(ExperimentError::Numerical(_)) => {
                        grid.push(GridPoint { lr, epochs, final_loss: None });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let last = *curve.last().expect("at least one epoch");
                grid.push(GridPoint { lr, epochs, final_loss: Some(last) });
                if best.as_ref().is_none_or(|b| last < b.0) {
                    best = Some((last, m, curve, lr, epochs));
                }
            }
        }
        let Some((_, m, curve, lr, epochs)) = best else {
            return Err(ExperimentError::Numerical(format!(
                "every grid cell of the {} stage diverged at step {}",
                stage.name, subset.step
            )));
        };
        memories = m;
        logs.push(StageLog {
            stage: stage.name.into(),
            lr,
            epochs,
            curve,
            grid,
        });
    }
    Ok((memories, logs))
}

/// Train every step in order on top of the frozen `base`. `after_step` runs
/// between steps with the pool so far; evaluation-split reads made by the
/// training itself are rejected.
pub fn continual_train(
    config: &ExperimentConfig,
    task: &ContinualTask,
    base: &Detector,
    log: &mut dyn FnMut(String),
    after_step: &mut dyn FnMut(&MemoryPool) -> Result<()>,
) -> Result<ContinualRun> {
    let mut cfg = config.detector.clone();
    cfg.vocab = base.config().vocab.clone();
    cfg.validate()?;
    let root = SeededRng::new(config.seed);
    let mut pool = MemoryPool::new(cfg.clone());
    let mut steps = Vec::new();
    let before = base.params().to_le_bytes();
    for subset in task.subsets() {
        let reads = task.eval_reads();
        let mut rng = root.fork(0x1000 + subset.step as u64);
        let start = init_step_memories(&pool, &mut rng);
        let (memories, stages) = train_step(base, &cfg, subset, start, config, &mut rng)?;
        let protos = build_prototypes(base, &subset.train, &subset.label_set, &config.prototypes, &mut rng)?;
        let triplet = MemoryTriplet::new(subset.step, subset.label_set.clone(), protos, memories)?;
        let digest = triplet.digest();
        let added = triplet.memories.num_params();
        pool.memorize(triplet)?;
        if task.eval_reads() != reads {
            return Err(ExperimentError::Data(format!(
                "evaluation images were read while training step {}",
                subset.step
            )));
        }
        for s in &stages {
            log(format!(
                "step {} {} lr {} epochs {} final loss {:.4}",
                subset.step,
                s.stage,
                s.lr,
                s.epochs,
                s.curve.last().copied().unwrap_or(f64::NAN)
            ));
        }
        steps.push(StepLog {
            step: subset.step,
            stages,
            added_params: added,
            triplet_digest: digest,
        });
        after_step(&pool)?;
    }
    if base.params().to_le_bytes() != before {
        return Err(ExperimentError::Numerical("the frozen base changed during training".into()));
    }
    Ok(ContinualRun { pool, steps })
}
