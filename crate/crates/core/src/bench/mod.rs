//! Benchmark data and metrics: synthetic continual tasks, COCO-format I/O,
//! average precision, aggregation over continual steps and average ranks.

pub mod ap;
pub mod coco;
pub mod report;
pub mod synth;

pub use ap::{compute_ap, ApResult, GroundTruth, Prediction};
pub use coco::{load_coco_format, CocoCategory, CocoDataset, CocoImage};
pub use report::{
    aggregate, average_rank, fractional_ranks, leaderboard, rank_reports, to_csv, EvalReport, Ranks, ReportInput,
};
pub use synth::{generate_synthetic_task, ContinualTask, Domain, EvalSplit, Split, Subset, TaskParams};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
