//! metrics.csv rows, the run report and the cross-run comparison table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::StepTiming;
use super::config::{ExperimentConfig, Method};
use crate::binio;
use crate::error::{Error, Result};
use crate::eval::StepMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub step: usize,
    pub accuracy: f64,
    pub forgetting: f64,
    /// JSON array of per-task accuracies under the global matching.
    pub per_task_accuracy: String,
    pub n_samples: usize,
}

impl MetricsRow {
    pub fn new(method: Method, m: &StepMetrics) -> Self {
        MetricsRow {
            method: method.name().to_string(),
            step: m.step,
            accuracy: m.accuracy,
            forgetting: m.forgetting,
            per_task_accuracy: serde_json::to_string(&m.per_task_accuracy).expect("floats serialize"),
            n_samples: m.n_samples,
        }
    }
}

pub fn encode_metrics(method: Method, metrics: &[StepMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(MetricsRow::new(method, m)).expect("in-memory csv");
    }
    if metrics.is_empty() {
        w.write_record(["method", "step", "accuracy", "forgetting", "per_task_accuracy", "n_samples"])
            .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn write_metrics(path: &Path, method: Method, metrics: &[StepMetrics]) -> Result<()> {
    binio::write_atomic(path, &encode_metrics(method, metrics))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = binio::read_file(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Format {
            offset: e.position().map_or(0, |p| p.byte()),
            message: format!("{}: {e}", path.display()),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub method: Method,
    pub config: ExperimentConfig,
    pub steps: Vec<StepMetrics>,
    pub timings: Vec<StepTiming>,
    /// False when the run stopped early at `max_steps`.
    pub complete: bool,
}

impl RunReport {
    pub fn last(&self) -> Option<&StepMetrics> {
        self.steps.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub accuracy: f64,
    pub forgetting: f64,
    pub runs: usize,
}

/// Final-step accuracy and forgetting, averaged per method over runs.
pub fn summarize(runs: &[Vec<MetricsRow>]) -> Result<Vec<MethodSummary>> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for rows in runs {
        let last = rows
            .iter()
            .max_by_key(|r| r.step)
            .ok_or_else(|| Error::invalid("a run has no metrics rows"))?;
        let e = acc.entry(last.method.clone()).or_default();
        e.0 += last.accuracy;
        e.1 += last.forgetting;
        e.2 += 1;
    }
    let rank = |m: &str| Method::parse(m).map_or(usize::MAX, |m| m as usize);
    let mut out: Vec<MethodSummary> = acc
        .into_iter()
        .map(|(method, (a, f, n))| MethodSummary {
            method,
            accuracy: a / n as f64,
            forgetting: f / n as f64,
            runs: n,
        })
        .collect();
    out.sort_by(|a, b| rank(&a.method).cmp(&rank(&b.method)).then(a.method.cmp(&b.method)));
    Ok(out)
}

/// Markdown table, percentages with one decimal.
pub fn comparison_table(summary: &[MethodSummary]) -> String {
    let mut s = String::from("| Method | 𝓐 (%) | 𝓕 (%) | runs |\n|---|---:|---:|---:|\n");
    for m in summary {
        s.push_str(&format!(
            "| {} | {:.1} | {:.1} | {} |\n",
            m.method,
            100.0 * m.accuracy,
            100.0 * m.forgetting,
            m.runs
        ));
    }
    s.push_str("| joint (unfrozen) | unavailable | unavailable | 0 |\n");
    s
}
