// SPDX-License-Identifier: MIT OR Apache-2.0

//! Settings merged from an optional JSON config file and command-line flags.
//! Flags win over the file; the file wins over defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use erasure::report::OutputFormat;
use serde::{Deserialize, Serialize};

/// Every setting any subcommand understands. The config file uses the same
/// names as the flags, with underscores.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Weight file
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Token corpus (JSON lines)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary bundle
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Number of sampled prompts
    #[arg(long)]
    pub n: Option<usize>,
    /// Tokens per sampled prompt
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the JSON report goes to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json, csv or both
    #[arg(long)]
    pub format: Option<OutputFormat>,
    /// Overlay the trace with writer → eraser V-composition removed
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub patch_vcomp: Option<bool>,
    /// Eraser margin: q75 must lie below -threshold
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Keep position 0 in pooled statistics
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_pos0: Option<bool>,
    /// Writing component, e.g. L0H2
    #[arg(long)]
    pub writer: Option<String>,
    /// Target component for scans and patching, e.g. L0H2
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated eraser heads, e.g. L2H2,L2H3
    #[arg(long, value_delimiter = ',')]
    pub erasers: Option<Vec<String>>,
    /// Comma-separated layers to scan
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Donor prompts per fixture
    #[arg(long)]
    pub donors: Option<usize>,
    /// Comparison heads per fixture
    #[arg(long)]
    pub compare: Option<usize>,
    /// Prepend the vocabulary's BOS token to fixtures
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub bos: Option<bool>,
    /// Reference-logits fixture file
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

impl Settings {
    /// Fields set in `self` override those in `base`.
    pub fn over(self, base: Settings) -> Settings {
        Settings {
            model: self.model.or(base.model),
            corpus: self.corpus.or(base.corpus),
            vocab: self.vocab.or(base.vocab),
            n: self.n.or(base.n),
            len: self.len.or(base.len),
            seed: self.seed.or(base.seed),
            out: self.out.or(base.out),
            format: self.format.or(base.format),
            patch_vcomp: self.patch_vcomp.or(base.patch_vcomp),
            threshold: self.threshold.or(base.threshold),
            include_pos0: self.include_pos0.or(base.include_pos0),
            writer: self.writer.or(base.writer),
            target: self.target.or(base.target),
            erasers: self.erasers.or(base.erasers),
            layers: self.layers.or(base.layers),
            donors: self.donors.or(base.donors),
            compare: self.compare.or(base.compare),
            bos: self.bos.or(base.bos),
            fixtures: self.fixtures.or(base.fixtures),
        }
    }

    /// The settings embedded in a report: everything except where and how
    /// the report is written.
    pub fn for_report(&self) -> Settings {
        Settings {
            out: None,
            format: None,
            ..self.clone()
        }
    }

    /// Reads a config file, or the settings embedded in a report file.
    pub fn load(path: &Path) -> Result<Settings, String> {
        let err = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
        let text = std::fs::read_to_string(path).map_err(|e| err(&e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| err(&e))?;
        if value.get("format_version").is_some() && value.get("config").is_some() {
            value = value["config"]
                .get("settings")
                .cloned()
                .ok_or_else(|| err(&"report has no embedded settings"))?;
        }
        serde_json::from_value(value).map_err(|e| err(&e))
    }
}
