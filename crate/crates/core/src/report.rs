//! Report tables for a finished matrix: a JSON document with every run's
//! summary and trace, and a long-format CSV of the metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricSummary;
use crate::pipeline::{Method, PipelineError, RerankStats, RunArtifact, RunMetadata};

pub const CSV_HEADER: [&str; 6] = ["run", "method", "generation", "rerank", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub method: Method,
    pub generation: bool,
    pub rerank: bool,
    pub fingerprint: String,
    pub summary: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_stats: Option<RerankStats>,
    pub metadata: RunMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub runs: Vec<RunReport>,
}

impl MatrixReport {
    pub fn from_artifacts(artifacts: &[RunArtifact]) -> Self {
        let runs = artifacts
            .iter()
            .map(|a| RunReport {
                name: a.name.clone(),
                method: a.config.method,
                generation: a.config.use_generation,
                rerank: a.config.use_rerank,
                fingerprint: a.fingerprint.clone(),
                summary: a.summary.clone(),
                rerank_stats: a.rerank_stats.clone(),
                metadata: a.metadata.clone(),
            })
            .collect();
        Self { runs }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String, PipelineError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| PipelineError::Report(e.to_string());
        w.write_record(CSV_HEADER).map_err(err)?;
        for run in &self.runs {
            let method = serde_json::to_value(run.method).expect("methods serialize");
            let method = method.as_str().unwrap_or_default().to_string();
            for (metric, value) in run.summary.rows() {
                w.write_record([
                    run.name.as_str(),
                    &method,
                    if run.generation { "on" } else { "off" },
                    if run.rerank { "on" } else { "off" },
                    &metric,
                    &format!("{value:.6}"),
                ])
                .map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let io = |e: std::io::Error| PipelineError::Report(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.json"), self.to_json()).map_err(io)?;
        fs::write(dir.join("report.csv"), self.to_csv()?).map_err(io)?;
        Ok(())
    }
}

/// Writes per-run point traces as `<dir>/runs/<index>.json`.
pub fn write_traces(artifacts: &[RunArtifact], dir: &Path) -> Result<(), PipelineError> {
    let runs = dir.join("runs");
    let io = |e: std::io::Error| PipelineError::Report(format!("{}: {e}", runs.display()));
    fs::create_dir_all(&runs).map_err(io)?;
    for (i, a) in artifacts.iter().enumerate() {
        let text = serde_json::to_string_pretty(a).expect("artifacts serialize");
        fs::write(runs.join(format!("{i:02}.json")), text + "\n").map_err(io)?;
    }
    Ok(())
}

/// Fixed-width table for terminal output.
pub fn render_table(report: &MatrixReport) -> String {
    let Some(first) = report.runs.first() else {
        return String::new();
    };
    let metrics: Vec<String> = first.summary.rows().into_iter().map(|(m, _)| m).collect();
    let width = report.runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:width$}", "run");
    for m in &metrics {
        out.push_str(&format!(" {m:>11}"));
    }
    out.push('\n');
    for run in &report.runs {
        out.push_str(&format!("{:width$}", run.name));
        let rows = run.summary.rows();
        for m in &metrics {
            match rows.iter().find(|(name, _)| name == m) {
                Some((_, v)) => out.push_str(&format!(" {v:>11.4}")),
                None => out.push_str(&format!(" {:>11}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
