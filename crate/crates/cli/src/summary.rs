//! `run_summary.json`: what ran, with which config and seed, and the result.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use portrait_core::config::RunConfig;

pub const SUMMARY_FILE: &str = "run_summary.json";
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub command: String,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// The fully resolved config; rerunning with it and `seed` repeats the run.
    pub config: Value,
    pub elapsed_secs: f64,
    pub result: Value,
}

impl RunSummary {
    pub fn start(command: &str, cfg: &RunConfig, config_file: Option<&Path>, overrides: &[String]) -> Self {
        Self {
            format_version: SUMMARY_VERSION,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_file: config_file.map(Path::to_path_buf),
            overrides: overrides.to_vec(),
            config: serde_json::to_value(cfg).unwrap_or(Value::Null),
            elapsed_secs: 0.0,
            result: Value::Null,
        }
    }

    pub fn finish(&mut self, result: Value, elapsed_secs: f64) {
        self.result = result;
        self.elapsed_secs = elapsed_secs;
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
