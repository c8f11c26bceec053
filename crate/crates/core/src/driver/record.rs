//! Observation records and their JSONL form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::DriverError;
use crate::space::{config_from_json, config_to_json, Configuration, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// Where a record's configuration came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Init,
    Acquisition,
    Random,
    /// Supplied through `tell` without a matching `ask`.
    External,
    /// Offline data (meta-training tasks).
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub iter: usize,
    pub config: Configuration,
    /// `None` for failed evaluations.
    pub y: Option<f64>,
    pub status: Status,
    pub seed: u64,
    pub wall_ms: u64,
    pub ts: u64,
    pub source: Source,
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    iter: usize,
    subspace_id: usize,
    config: Json,
    y: Option<f64>,
    status: Status,
    seed: u64,
    wall_ms: u64,
    ts: u64,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl ObservationRecord {
    pub fn subspace_id(&self) -> usize {
        self.config.subspace_id
    }

    pub fn to_line(&self) -> String {
        let line = Line {
            iter: self.iter,
            subspace_id: self.config.subspace_id,
            config: config_to_json(&self.config)["raw"].clone(),
            y: self.y,
            status: self.status,
            seed: self.seed,
            wall_ms: self.wall_ms,
            ts: self.ts,
            source: self.source,
            error: self.error.clone(),
        };
        serde_json::to_string(&line).expect("record serializes")
    }

    pub fn from_line(text: &str, space: &SearchSpace) -> Result<Self, String> {
        let line: Line = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let json = serde_json::json!({ "raw": line.config, "subspace_id": line.subspace_id });
        let config = config_from_json(&json, space).map_err(|e| e.to_string())?;
        match (line.status, line.y) {
            (Status::Ok, Some(y)) if y.is_finite() => {}
            (Status::Ok, _) => return Err("successful record without a finite `y`".into()),
            (Status::Failed, Some(_)) => return Err("failed record carries a `y`".into()),
            (Status::Failed, None) => {}
        }
        Ok(ObservationRecord {
            iter: line.iter,
            config,
            y: line.y,
            status: line.status,
            seed: line.seed,
            wall_ms: line.wall_ms,
            ts: line.ts,
            source: line.source,
            error: line.error,
        })
    }
}

/// All observations of a run, grouped by subspace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    pub records: Vec<ObservationRecord>,
    by_subspace: BTreeMap<usize, Vec<usize>>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ObservationRecord) {
        self.by_subspace.entry(record.subspace_id()).or_default().push(self.records.len());
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn in_subspace(&self, id: usize) -> impl Iterator<Item = &ObservationRecord> {
        self.by_subspace.get(&id).into_iter().flatten().map(|&i| &self.records[i])
    }

    /// Successful `(config, y)` pairs in record order.
    pub fn successes(&self) -> impl Iterator<Item = (&Configuration, f64)> {
        self.records.iter().filter_map(|r| r.y.map(|y| (&r.config, y)))
    }

    pub fn n_successes(&self) -> usize {
        self.successes().count()
    }

    /// Lowest observed value with its record.
    pub fn best(&self) -> Option<&ObservationRecord> {
        self.records
            .iter()
            .filter(|r| r.y.is_some())
            .min_by(|a, b| a.y.unwrap().total_cmp(&b.y.unwrap()))
    }

    /// Running minimum after each record (`inf` until the first success).
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                if let Some(y) = r.y {
                    best = best.min(y);
                }
                best
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Parses a log; errors carry 1-based line numbers.
    pub fn from_jsonl(text: &str, space: &SearchSpace) -> Result<Self, DriverError> {
        let mut set = ObservationSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = ObservationRecord::from_line(line, space).map_err(|msg| DriverError::Log { line: i + 1, msg })?;
            set.push(r);
        }
        Ok(set)
    }
}
