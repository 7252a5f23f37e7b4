//! Multi-task performance deltas: the mean relative per-task change of a
//! multi-task model against single-task baselines, sign-adjusted for metric
//! direction, reported in percent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One task's evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub value: f64,
    /// 1-direction flag of the metric: true when lower is better.
    pub lower_is_better: bool,
}

impl TaskMetric {
    pub fn new(task: impl Into<String>, value: f64, lower_is_better: bool) -> Self {
        TaskMetric {
            task: task.into(),
            value,
            lower_is_better,
        }
    }
}

/// `(100/T) Σ_i (−1)^{l_i} (M_{m,i} − M_{s,i}) / M_{s,i}` over matched task
/// lists, in percent.
pub fn delta_mtl(multi: &[TaskMetric], single: &[TaskMetric]) -> Result<f64> {
    if multi.is_empty() {
        return Err(Error::precondition("delta_mtl over an empty task list"));
    }
    if multi.len() != single.len() {
        return Err(Error::contract(format!(
            "task lists differ in length ({} vs {})",
            multi.len(),
            single.len()
        )));
    }
    let mut total = 0.0;
    for m in multi {
        let s = single
            .iter()
            .find(|s| s.task == m.task)
            .ok_or_else(|| Error::contract(format!("no baseline metric for task {:?}", m.task)))?;
        if s.value == 0.0 {
            return Err(Error::contract(format!(
                "baseline metric for task {:?} is zero",
                m.task
            )));
        }
        if m.lower_is_better != s.lower_is_better {
            return Err(Error::contract(format!(
                "metric direction disagrees for task {:?}",
                m.task
            )));
        }
        let sign = if m.lower_is_better { -1.0 } else { 1.0 };
        total += sign * (m.value - s.value) / s.value;
    }
    Ok(100.0 * total / multi.len() as f64)
}

/// The delta restricted to a designated subset of tasks (the two-task
/// variant used for headline pairs).
pub fn delta_mtl_subset(
    multi: &[TaskMetric],
    single: &[TaskMetric],
    tasks: &[&str],
) -> Result<f64> {
    let pick = |list: &[TaskMetric]| -> Vec<TaskMetric> {
        list.iter()
            .filter(|m| tasks.contains(&m.task.as_str()))
            .cloned()
            .collect()
    };
    let m = pick(multi);
    if m.len() != tasks.len() {
        return Err(Error::contract("subset names a task without a metric"));
    }
    delta_mtl(&m, &pick(single))
}
