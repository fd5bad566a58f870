// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-describing experiment reports.
//!
//! A report is a pure function of its inputs: no timestamps, no host data,
//! and every map is ordered, so identical runs serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{FitResult, QuantileSummary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const REPORT_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub config: ModelConfig,
}

impl From<&Model> for ModelInfo {
    fn from(m: &Model) -> Self {
        Self {
            name: m.name.clone(),
            config: m.config.clone(),
        }
    }
}

/// Units and orientation conventions every report carries.
pub fn conventions() -> BTreeMap<String, String> {
    [
        ("projection_ratio", "PR(a, b) = (a.b) / |b|^2, dimensionless; 1 means a contains b fully, -1 means a cancels b"),
        ("resid_trace", "PR(resid[checkpoint][pos], writer_out[pos])"),
        ("component_projection", "PR(candidate_out[pos], target_out[pos])"),
        ("summed_projection", "PR(sum of parts[pos], target_out[pos])"),
        ("degenerate_reference", "positions with |b|^2 < 1e-12 are excluded and counted, never zero-filled"),
        ("position_0", "excluded from pooled statistics unless include_pos0 is set"),
        ("quantiles", "linear interpolation between order statistics at rank p(n-1)"),
        ("dla", "logit units; final layer norm frozen at the clean run's per-position scale; beta.W_U + b_U is never attributed"),
        ("logit_diff", "logit[token_a] - logit[token_b]; token_a is the model's top-1, token_b its top-2 unless stated"),
        ("checkpoints", "resid_pre_l, resid_mid_l (after attention), resid_post_l (after MLP)"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::format("csv", e.to_string());
        w.write_record(&self.columns).map_err(fail)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                Value::String(s) => s.clone(),
                Value::Null => String::new(),
                other => other.to_string(),
            }))
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A fit, or the reason none could be made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOutcome {
    Fit(FitResult),
    Error(String),
}

impl From<Result<FitResult>> for FitOutcome {
    fn from(r: Result<FitResult>) -> Self {
        match r {
            Ok(f) => FitOutcome::Fit(f),
            Err(e) => FitOutcome::Error(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: String,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub model: ModelInfo,
    pub conventions: BTreeMap<String, String>,
    pub tables: BTreeMap<String, Table>,
    pub summaries: BTreeMap<String, QuantileSummary>,
    pub fits: BTreeMap<String, FitOutcome>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Both,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown output format `{s}` (json, csv, both)"))),
        }
    }
}

impl RunReport {
    pub fn new(command: &str, config: Value, seed: u64, model: &Model) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION.to_string(),
            command: command.to_string(),
            config,
            seed,
            model: model.into(),
            conventions: conventions(),
            tables: BTreeMap::new(),
            summaries: BTreeMap::new(),
            fits: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("report", e.to_string()))
    }

    /// Writes `report.json` and/or one `<table>.csv` per table into `dir`,
    /// returning the paths written.
    pub fn write(&self, dir: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        if matches!(format, OutputFormat::Json | OutputFormat::Both) {
            put("report.json".into(), self.to_json())?;
        }
        if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
            for (name, table) in &self.tables {
                put(format!("{name}.csv"), table.to_csv()?)?;
            }
        }
        Ok(written)
    }
}
