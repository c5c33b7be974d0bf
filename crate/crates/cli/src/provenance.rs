//! `config.txt` and `run.json`: what ran, with which settings, and how it ended.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::{echo, Settings};

pub const CONFIG_ECHO: &str = "config.txt";
pub const RUN_RECORD: &str = "run.json";

pub fn write_config(out: &Path, settings: &Settings) -> Result<()> {
    let path = out.join(CONFIG_ECHO);
    std::fs::write(&path, echo(settings)).with_context(|| format!("writing {}", path.display()))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub deterministic: bool,
    pub config: &'static str,
    /// Perceptual feature source; `random:<seed>` means not pretrained.
    pub extractor: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: &'static str,
    pub error: Option<String>,
    pub exit_code: Option<u8>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific summary (final losses, aggregate metrics, ...).
    pub summary: serde_json::Value,
}

impl RunRecord {
    pub fn start(command: &str, settings: &Settings) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed: settings.train.seed,
            deterministic: settings.train.deterministic,
            config: CONFIG_ECHO,
            extractor: settings.extractor.source.clone(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running",
            error: None,
            exit_code: None,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn finish(&mut self, failure: Option<(String, u8)>) {
        self.finished_unix = Some(unix_now());
        match failure {
            None => {
                self.status = "ok";
                self.exit_code = Some(0);
            }
            Some((message, code)) => {
                self.status = "failed";
                self.error = Some(message);
                self.exit_code = Some(code);
            }
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(RUN_RECORD);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
