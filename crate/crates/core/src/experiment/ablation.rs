//! Ablation protocols: component grid, interaction-layer count, training
//! mode, retrieval kind and shot count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{continual_train, evaluate, EvalMode, ExperimentConfig, ExperimentError, Result, TrainingMode};
use crate::bench::{generate_synthetic_task, leaderboard, rank_reports, to_csv, ContinualTask, EvalReport};
use crate::detector::Detector;
use crate::memory::{count_added_params, MemoryPool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Components,
    Layers,
    Joint,
    Oracle,
    Shots,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::Components,
        AblationKind::Layers,
        AblationKind::Joint,
        AblationKind::Oracle,
        AblationKind::Shots,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Components => "components",
            AblationKind::Layers => "layers",
            AblationKind::Joint => "joint",
            AblationKind::Oracle => "oracle",
            AblationKind::Shots => "shots",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub report: EvalReport,
    /// Added parameters of one activated triplet.
    pub triplet_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBundle {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    pub leaderboard: String,
    pub csv: String,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    base: &'a Detector,
    log: &'a mut dyn FnMut(String),
}

impl Runner<'_> {
    fn train(&mut self, config: &ExperimentConfig, task: &ContinualTask) -> Result<MemoryPool> {
        Ok(continual_train(config, task, self.base, self.log, &mut |_| Ok(()))?.pool)
    }

    fn row(
        &mut self,
        pool: &MemoryPool,
        task: &ContinualTask,
        mode: EvalMode,
        method: &str,
    ) -> Result<AblationRow> {
        let ev = evaluate(pool, self.base, task, mode, &self.config.retrieval, method)?;
        (self.log)(format!(
            "{method}: seen {:.4} unseen {:.4}",
            ev.report.ap_seen,
            ev.report.ap_unseen.unwrap_or(0.0)
        ));
        let triplet_params = if mode == EvalMode::ZeroShot {
            0
        } else {
            count_added_params(pool.config()).total
        };
        Ok(AblationRow {
            report: ev.report,
            triplet_params,
        })
    }

    fn variant(&self, f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
        let mut c = self.config.clone();
        f(&mut c);
        c
    }
}

/// Run one ablation on top of the frozen `base` and rank its rows.
pub fn run_ablation(
    kind: AblationKind,
    config: &ExperimentConfig,
    task: &ContinualTask,
    base: &Detector,
    log: &mut dyn FnMut(String),
) -> Result<AblationBundle> {
    let mut r = Runner { config, base, log };
    let mut rows = Vec::new();
    match kind {
        AblationKind::Components => {
            let prompt_only = r.variant(|c| c.detector.lora_layers = 0);
            let con = r.train(&prompt_only, task)?;
            let full = r.train(config, task)?;
            rows.push(r.row(&con, task, EvalMode::ZeroShot, "base")?);
            rows.push(r.row(&con, task, EvalMode::NoRetrievalLastTriplet, "+con")?);
            rows.push(r.row(&con, task, EvalMode::Threshold, "+con+retrieval")?);
            rows.push(r.row(&full, task, EvalMode::NoRetrievalLastTriplet, "+con+inc")?);
            rows.push(r.row(&full, task, EvalMode::Threshold, "full")?);
        }
        AblationKind::Layers => {
            for layers in 0..=config.detector.fusion_layers {
                let c = r.variant(|c| c.detector.lora_layers = layers);
                let pool = r.train(&c, task)?;
                rows.push(r.row(&pool, task, EvalMode::Threshold, &format!("layers={layers}"))?);
            }
        }
        AblationKind::Joint => {
            for mode in [TrainingMode::Decoupled, TrainingMode::Joint] {
                let c = r.variant(|c| c.mode = mode);
                let pool = r.train(&c, task)?;
                let name = match mode {
                    TrainingMode::Decoupled => "decoupled",
                    TrainingMode::Joint => "joint",
                };
                rows.push(r.row(&pool, task, EvalMode::Threshold, name)?);
            }
        }
        AblationKind::Oracle => {
            let pool = r.train(config, task)?;
            rows.push(r.row(&pool, task, EvalMode::Threshold, "threshold")?);
            rows.push(r.row(&pool, task, EvalMode::Oracle, "oracle")?);
        }
        AblationKind::Shots => {
            for shots in [1, 3, 5, 10] {
                let c = r.variant(|c| c.task.shots = shots);
                let t = generate_synthetic_task(&c.task_params())?;
                let pool = r.train(&c, &t)?;
                rows.push(r.row(&pool, &t, EvalMode::Threshold, &format!("shots={shots}"))?);
            }
        }
    }
    let mut reports: Vec<EvalReport> = rows.iter().map(|x| x.report.clone()).collect();
    rank_reports(&mut reports)?;
    for (row, rep) in rows.iter_mut().zip(reports.iter()) {
        row.report = rep.clone();
    }
    Ok(AblationBundle {
        kind,
        leaderboard: leaderboard(&reports),
        csv: to_csv(&reports),
        rows,
    })
}
