//! Structured run log: one record per epoch plus structural-phase events,
//! persisted as JSON lines. Serialization is deterministic; no timestamps
//! are recorded, so a fixed seed reproduces the log byte for byte.

use crate::archgraph::FlopReport;
use crate::error::{Error, Result};
use crate::similarity::Grouping;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Task,
    Structural,
    FineTune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunRecord {
    /// Run header: the configuration in effect.
    Meta { config: serde_json::Value },
    Epoch {
        /// Global epoch counter over all phases.
        wall: usize,
        /// Budget clock: task-learning plus fine-tuning epochs only.
        clock: usize,
        phase: PhaseTag,
        lambda: f64,
        lr: f64,
        /// Per-task training losses (empty during structural epochs).
        train_loss: BTreeMap<String, f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        amalgamation_loss: Option<f64>,
        /// Per-task validation metrics.
        val_metric: BTreeMap<String, f64>,
        params: u64,
        flops: u64,
    },
    /// Pairwise CKA at one fusion site, as seen by the grouping step.
    Similarity {
        phase: usize,
        site: String,
        tasks: Vec<String>,
        matrix: Vec<Vec<f64>>,
    },
    /// The chosen grouping at one fusion site.
    GroupingChoice {
        phase: usize,
        site: String,
        grouping: Grouping,
        fused: Vec<Vec<String>>,
    },
    /// One group node creation.
    Fusion {
        phase: usize,
        members: Vec<String>,
        node: u32,
        depth: usize,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: RunRecord) {
        self.records.push(r);
    }

    pub fn epochs(&self) -> impl Iterator<Item = &RunRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, RunRecord::Epoch { .. }))
    }

    /// One JSON document per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::contract(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<RunLog> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?,
            );
        }
        Ok(RunLog { records })
    }

    /// Checks that epoch phase tags follow `(task+ structural*)^k fine_tune*`
    /// with `k ≤ max_phases`, and that λ is 0 in every fine-tune epoch.
    pub fn validate_phase_pattern(&self, max_phases: usize) -> Result<()> {
        #[derive(PartialEq, Clone, Copy)]
        enum S {
            Start,
            Task,
            Structural,
            FineTune,
        }
        let mut state = S::Start;
        let mut blocks = 0usize;
        for r in self.epochs() {
            let RunRecord::Epoch { phase, lambda, .. } = r else {
                unreachable!()
            };
            state = match (state, phase) {
                (S::Start | S::Structural, PhaseTag::Task) => {
                    blocks += 1;
                    S::Task
                }
                (S::Task, PhaseTag::Task) => S::Task,
                (S::Task | S::Structural, PhaseTag::Structural) => S::Structural,
                (S::Start | S::Task | S::Structural | S::FineTune, PhaseTag::FineTune) => {
                    if *lambda != 0.0 {
                        return Err(Error::contract("fine-tune epoch with nonzero λ"));
                    }
                    S::FineTune
                }
                _ => return Err(Error::contract("phase tags out of order")),
            };
        }
        if blocks > max_phases {
            return Err(Error::contract(format!(
                "{blocks} task phases exceed the scheduled {max_phases}"
            )));
        }
        Ok(())
    }

    /// Parameter counts sampled per epoch must never increase.
    pub fn validate_monotone_params(&self) -> Result<()> {
        let mut last: Option<u64> = None;
        for r in self.epochs() {
            let RunRecord::Epoch { params, .. } = r else {
                unreachable!()
            };
            if let Some(prev) = last {
                if *params > prev {
                    return Err(Error::contract(format!(
                        "parameter count rose from {prev} to {params}"
                    )));
                }
            }
            last = Some(*params);
        }
        Ok(())
    }

    pub fn final_cost(&self) -> Option<FlopReport> {
        self.epochs().last().map(|r| {
            let RunRecord::Epoch { params, flops, .. } = r else {
                unreachable!()
            };
            FlopReport {
                parameter_count: *params,
                flops_per_sample: *flops,
            }
        })
    }
}
