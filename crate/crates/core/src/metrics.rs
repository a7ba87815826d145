//! Metric records and per-run logs.

use serde::{Deserialize, Serialize};

/// One observation. `step` counts teacher updates for supervised runs and
/// environment steps for RL runs. `t` is a logical clock (total updates or
/// environment steps so far) so that metric files are reproducible byte for
/// byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub role: String,
    pub step: u64,
    pub name: String,
    pub value: f64,
    pub t: f64,
}

/// Append-only metric stream of a single run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    run_id: String,
    role: String,
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new(run_id: impl Into<String>, role: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            role: role.into(),
            records: Vec::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn push(&mut self, step: u64, name: impl Into<String>, value: f64, t: f64) {
        let name = name.into();
        debug_assert!(
            self.records.last().is_none_or(|r| r.step <= step),
            "steps must be non-decreasing"
        );
        debug_assert!(
            !self.records.iter().rev().take_while(|r| r.step == step).any(|r| r.name == name),
            "duplicate metric {name} at step {step}"
        );
        self.records.push(MetricRecord {
            run_id: self.run_id.clone(),
            role: self.role.clone(),
            step,
            name,
            value,
            t,
        });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }

    /// `(step, value)` series for one metric name.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        series(&self.records, name)
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.name == name).map(|r| r.value)
    }
}

pub fn series(records: &[MetricRecord], name: &str) -> Vec<(u64, f64)> {
    records.iter().filter(|r| r.name == name).map(|r| (r.step, r.value)).collect()
}

/// One JSON object per line.
pub fn to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        out.push('\n');
    }
    out
}
