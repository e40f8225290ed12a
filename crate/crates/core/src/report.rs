//! Run manifests and multi-run summaries.
//!
//! Every run writes `manifest.json` next to its artifacts. A manifest with
//! `complete = false` marks a run that stopped early; its artifacts must not
//! be trusted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::eval_metrics::{EMBEDDER_NAME, NORMALIZATION_VERSION};
use crate::TOOL_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

/// How per-prompt scores are reduced to one number.
pub const AGGREGATION_NOTE: &str = "scores are unweighted means over prompts; CV uses the population standard deviation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Hash of the model configuration, or of the trace file.
    pub config_hash: String,
    pub embedder: String,
    pub normalization_version: u32,
    pub aggregation: String,
    pub jobs: Option<usize>,
    pub complete: bool,
    /// Artifact file names relative to the run directory.
    pub artifacts: Vec<String>,
    /// Headline numbers of the run.
    pub metrics: BTreeMap<String, f64>,
    /// Command-specific settings.
    pub params: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.into(),
            seed,
            config_hash: config_hash.into(),
            embedder: EMBEDDER_NAME.to_string(),
            normalization_version: NORMALIZATION_VERSION,
            aggregation: AGGREGATION_NOTE.to_string(),
            jobs: None,
            complete: false,
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.params
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| LabError::Serialization(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| LabError::io(&path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRef {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Metrics of several runs side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    pub runs: Vec<RunRef>,
    /// One value per run, `NaN` where a run lacks the metric.
    pub metrics: BTreeMap<String, Vec<f64>>,
}

/// Merge manifests of completed runs made by one tool version.
pub fn report_bundle(manifests: &[Manifest]) -> Result<Summary> {
    let first = manifests
        .first()
        .ok_or_else(|| LabError::Aggregation("no runs to summarize".into()))?;
    for m in manifests {
        if m.tool_version != first.tool_version {
            return Err(LabError::Aggregation(format!(
                "mixed tool versions {} and {}",
                first.tool_version, m.tool_version
            )));
        }
        if !m.complete {
            return Err(LabError::Aggregation(format!("run {} is incomplete", m.command)));
        }
    }
    let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, m) in manifests.iter().enumerate() {
        for (k, &v) in &m.metrics {
            metrics.entry(k.clone()).or_insert_with(|| vec![f64::NAN; i]).push(v);
        }
        for vals in metrics.values_mut() {
            vals.resize(i + 1, f64::NAN);
        }
    }
    Ok(Summary {
        tool_version: first.tool_version.clone(),
        runs: manifests
            .iter()
            .map(|m| RunRef {
                command: m.command.clone(),
                seed: m.seed,
                config_hash: m.config_hash.clone(),
            })
            .collect(),
        metrics,
    })
}

/// Serialize a summary; `NaN` becomes `null`.
pub fn summary_json(s: &Summary) -> Result<String> {
    serde_json::to_string_pretty(s).map_err(|e| LabError::Serialization(e.to_string()))
}
