//! Run reports: one JSON document per scenario run.
//!
//! Reports are pretty-printed with sorted keys; together with the
//! deterministic numeric payloads, two runs of the same (config, seed,
//! version) produce identical files except for the wall-time field.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub bound: f64,
}

impl AssertionResult {
    /// `|observed - target| <= tolerance` style check.
    pub fn close(name: &str, observed: f64, target: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: (observed - target).abs() <= tolerance,
            observed,
            bound: tolerance,
        }
    }

    /// `observed <= bound` style check.
    pub fn below(name: &str, observed: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: observed <= bound,
            observed,
            bound,
        }
    }

    pub fn flag(name: &str, passed: bool) -> Self {
        Self {
            name: name.to_string(),
            passed,
            observed: if passed { 1.0 } else { 0.0 },
            bound: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub produced_files: Vec<String>,
    pub assertions: Vec<AssertionResult>,
    /// Flat numeric summary of the run.
    pub metrics: BTreeMap<String, f64>,
    /// Kind-specific structured payload.
    pub payload: serde_json::Value,
    /// Set when the run aborted; the partial report is still written.
    pub failure: Option<String>,
}

impl RunReport {
    pub fn new(scenario: &str, kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.to_string(),
            kind: kind.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            wall_time_s: 0.0,
            produced_files: Vec::new(),
            assertions: Vec::new(),
            metrics: BTreeMap::new(),
            payload: serde_json::Value::Null,
            failure: None,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.failure.is_none() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        // route through Value so every object, including this struct's own
        // fields, serializes with sorted keys
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
