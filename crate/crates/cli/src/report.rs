//! Fixed-width, machine-parsable training report. The generated-at line is
//! the single place a timestamp appears in any run artifact.

use mtsl_core::archgraph::ArchGraph;
use mtsl_core::error::{Error, Result};
use mtsl_core::metrics::{delta_mtl, delta_mtl_subset, TaskMetric};
use std::time::{SystemTime, UNIX_EPOCH};

pub fn render(
    graph: &ArchGraph,
    metrics: &[TaskMetric],
    baseline: Option<&[TaskMetric]>,
    sd_pair: Option<&[String]>,
) -> Result<String> {
    let cost = graph.cost();
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_err(|e| Error::contract(e.to_string()))?
        .as_secs();
    let mut out = String::new();
    out.push_str("# training report\n");
    out.push_str(&format!("# generated-at-unix: {stamp}\n"));
    out.push_str(&format!(
        "{:<12} {:>16} {:>9}\n",
        "task", "metric", "better"
    ));
    for m in metrics {
        out.push_str(&format!(
            "{:<12} {:>16.8} {:>9}\n",
            m.task,
            m.value,
            if m.lower_is_better { "lower" } else { "higher" }
        ));
    }
    out.push_str(&format!("{:<12} {:>16}\n", "params", cost.parameter_count));
    out.push_str(&format!("{:<12} {:>16}\n", "flops", cost.flops_per_sample));
    if let Some(base) = baseline {
        let overall = delta_mtl(metrics, base)?;
        out.push_str(&format!("{:<12} {:>15.2}%\n", "delta_mtl", overall));
        let pair: Vec<String> = match sd_pair {
            Some(p) => p.to_vec(),
            None => metrics.iter().take(2).map(|m| m.task.clone()).collect(),
        };
        if pair.len() == 2 {
            let refs: Vec<&str> = pair.iter().map(String::as_str).collect();
            let d = delta_mtl_subset(metrics, base, &refs)?;
            out.push_str(&format!(
                "{:<12} {:>15.2}%  pair: {}\n",
                "delta_pair",
                d,
                pair.join(",")
            ));
        }
    }
    Ok(out)
}
