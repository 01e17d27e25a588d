//! Run reports and their on-disk forms (`report.json`, `metrics.csv`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{AccuracyMetric, RunConfig};
use crate::error::{Error, Result};
use crate::inference::{average_accuracy, forgetting, pooled_accuracy, AccuracyMatrix};

pub fn version_string() -> String {
    format!("subnet-cil {}", env!("CARGO_PKG_VERSION"))
}

/// Mean loss parts over one epoch of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: u32,
    pub epoch: u32,
    pub steps: u32,
    pub l_labeled: f64,
    pub l_contrastive: f64,
    pub l_pseudo: f64,
    pub l_total: f64,
    pub pseudo_kept: u64,
    pub pseudo_seen: u64,
    pub pseudo_kept_rate: f64,
}

/// Weights selected by a committed task and the history size after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityLog {
    pub task: u32,
    pub class_set: Vec<u32>,
    pub mask_active: Vec<usize>,
    pub history_active: Vec<usize>,
    pub reused_from_history: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: Vec<(String, String)>,
    pub stream_digest: String,
    pub planned_epochs: Vec<usize>,
    pub epochs: Vec<EpochLog>,
    pub capacity: Vec<CapacityLog>,
    pub accuracy: AccuracyMatrix,
    pub average_accuracy: Option<f64>,
    pub pooled_accuracy: Option<f64>,
    pub forgetting: Vec<f64>,
    pub complete: bool,
    /// Excluded from the serialized report so that it stays reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, stream_digest: String) -> Self {
        RunReport {
            version: version_string(),
            config: cfg.to_kv(),
            stream_digest,
            planned_epochs: (0..cfg.stream.num_tasks).map(|t| cfg.planned_epochs(t)).collect(),
            epochs: Vec::new(),
            capacity: Vec::new(),
            accuracy: AccuracyMatrix::default(),
            average_accuracy: None,
            pooled_accuracy: None,
            forgetting: Vec::new(),
            complete: false,
            wall_clock_secs: 0.0,
        }
    }

    /// Recomputes the summary fields from the accuracy matrix.
    pub fn refresh_summary(&mut self) {
        self.average_accuracy = average_accuracy(&self.accuracy).ok();
        self.pooled_accuracy = pooled_accuracy(&self.accuracy).ok();
        self.forgetting = forgetting(&self.accuracy);
    }

    /// Headline accuracy under the configured metric.
    pub fn headline(&self, metric: AccuracyMetric) -> Option<f64> {
        match metric {
            AccuracyMetric::TaskMean => self.average_accuracy,
            AccuracyMetric::SamplePooled => self.pooled_accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(0, format!("bad report json: {e}")))
    }

    /// One row per (trained, evaluated) task pair.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("task_trained,task_evaluated,accuracy,n\n");
        for (t, (row, counts)) in self.accuracy.rows.iter().zip(&self.accuracy.counts).enumerate() {
            for (k, (acc, n)) in row.iter().zip(counts).enumerate() {
                let _ = writeln!(out, "{t},{k},{acc},{n}");
            }
        }
        out
    }
}

#[derive(Serialize)]
struct MetricRecord {
    task_trained: usize,
    task_evaluated: usize,
    accuracy: f64,
    n: usize,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    average_accuracy: Option<f64>,
    forgetting: &'a [f64],
}

impl RunReport {
    /// Line-delimited metric records followed by one summary record.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for (t, (row, counts)) in self.accuracy.rows.iter().zip(&self.accuracy.counts).enumerate() {
            for (k, (&accuracy, &n)) in row.iter().zip(counts).enumerate() {
                let rec = MetricRecord {
                    task_trained: t,
                    task_evaluated: k,
                    accuracy,
                    n,
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        let summary = SummaryRecord {
            average_accuracy: self.average_accuracy,
            forgetting: &self.forgetting,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub average_accuracy: f64,
    /// Change from the previous row; zero for the first.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub stream_digest: String,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<RunReport>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = String::from("| # | Method | Average Accuracy | Delta |\n|---|---|---|---|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:+.4} |",
                i + 1,
                r.method,
                r.average_accuracy,
                r.delta
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ablation serializes");
        s.push('\n');
        s
    }
}
