//! Pretraining of the frozen base, continual memory training, evaluation
//! modes, ablation protocols and run artifacts.

mod ablation;
mod checkpoint;
mod continual;
mod evaluate;
mod pretrain;
mod run;

pub use ablation::{run_ablation, AblationBundle, AblationKind, AblationRow};
pub use checkpoint::{decode_base, encode_base, load_base, save_base, BASE_MAGIC, BASE_VERSION};
pub use continual::{continual_train, train_step, ContinualRun, GridPoint, StageLog, StepLog};
pub use evaluate::{evaluate, subset_ap, EvalMode, Evaluation, SplitPredictions};
pub use pretrain::{pretrain_base, task_vocab, PretrainReport};
pub use run::{sha256_hex, write_artifact, FileDigest, RunManifest};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchError, TaskParams};
use crate::detector::{DetectorConfig, DetectorError, LossWeights};
use crate::memory::{MemoryError, PrototypeConfig};
use crate::retrieval::{RetrievalConfig, RetrievalError};
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("pretraining reached AP {reached:.4} below the floor {floor:.4}; epoch losses {curve:?}")]
    PretrainFailure { floor: f64, reached: f64, curve: Vec<f64> },
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for data or format
    /// problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) | Self::PretrainFailure { .. } => 4,
            Self::Data(_) | Self::Io(_) => 3,
            Self::Bench(BenchError::Config(_)) => 2,
            Self::Bench(_) => 3,
            Self::Detector(DetectorError::Config(_)) => 2,
            Self::Detector(DetectorError::Tensor(t)) | Self::Tensor(t) => tensor_code(t),
            Self::Detector(_) => 3,
            Self::Memory(MemoryError::Tensor(t)) => tensor_code(t),
            Self::Memory(MemoryError::Detector(DetectorError::Config(_))) => 2,
            Self::Memory(_) => 3,
            Self::Retrieval(RetrievalError::Config(_)) => 2,
            Self::Retrieval(_) => 3,
        }
    }
}

fn tensor_code(t: &TensorError) -> i32 {
    match t {
        TensorError::NonFinite { .. } | TensorError::Domain { .. } => 4,
        _ => 3,
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Prompt first with the low-rank updates frozen, then the reverse.
    Decoupled,
    /// Prompt and low-rank updates in one stage.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Chance that each absent pretraining class joins an image's query.
    pub negative_rate: f64,
    /// Minimum pretrain-split AP for the base to be accepted.
    pub ap_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 5e-4,
            weight_decay: 1e-2,
            negative_rate: 0.4,
            ap_floor: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epoch_candidates: Vec<usize>,
    pub lr_candidates: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grid_search: bool,
    /// Learning rate and epochs of every stage when the grid search is off.
    pub fixed_lr: f64,
    pub fixed_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epoch_candidates: (1..=10).collect(),
            lr_candidates: vec![1e-1, 4e-2, 1e-2, 1e-3, 1e-4],
            weight_decay: 1e-2,
            batch_size: 1,
            grid_search: false,
            fixed_lr: 5e-3,
            fixed_epochs: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub detector: DetectorConfig,
    pub retrieval: RetrievalConfig,
    pub task: TaskParams,
    pub pretrain: PretrainConfig,
    pub schedule: ScheduleConfig,
    pub mode: TrainingMode,
    pub loss: LossWeights,
    pub prototypes: PrototypeConfig,
    /// Where artifacts go; the CLI's `--out-dir` overrides it.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            detector: DetectorConfig::default(),
            retrieval: RetrievalConfig::default(),
            task: TaskParams::default(),
            pretrain: PretrainConfig::default(),
            schedule: ScheduleConfig::default(),
            mode: TrainingMode::Decoupled,
            loss: LossWeights::default(),
            prototypes: PrototypeConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// The task seed always follows the experiment seed.
    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.detector.validate()?;
        self.retrieval.validate()?;
        let s = &self.schedule;
        if s.epoch_candidates.is_empty() || s.lr_candidates.is_empty() {
            return bad("epoch and learning-rate candidate lists must be non-empty".into());
        }
        if s.epoch_candidates.contains(&0) || s.fixed_epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if s.lr_candidates.iter().chain([&s.fixed_lr]).any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive and finite".into());
        }
        if s.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        let p = &self.pretrain;
        if p.epochs == 0 || !(p.lr.is_finite() && p.lr > 0.0) {
            return bad("pretraining needs positive epochs and learning rate".into());
        }
        if !(0.0..=1.0).contains(&p.negative_rate) || !(0.0..=1.0).contains(&p.ap_floor) {
            return bad("negative rate and AP floor must lie in [0, 1]".into());
        }
        let t = &self.task;
        if t.subsets == 0 || t.classes_per_subset == 0 || t.shots == 0 {
            return bad("subsets, classes per subset and shots must be positive".into());
        }
        if t.image_size != self.detector.image_size() {
            return bad(format!(
                "task images are {:?} but the detector expects {:?}",
                t.image_size,
                self.detector.image_size()
            ));
        }
        if t.max_instances > self.detector.n_queries {
            return bad(format!(
                "{} instances per image exceed {} queries",
                t.max_instances, self.detector.n_queries
            ));
        }
        Ok(())
    }

    /// Parse a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(c)
    }
}
