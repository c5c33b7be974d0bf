//! Flat `section.key = value` run configuration.
//!
//! Values are JSON literals (`300`, `1e-4`, `true`, `[5, 50]`, `null`,
//! `"text"`); anything that does not parse as JSON is taken as a bare string.
//! Keys are the leaves of [`Settings`]; anything else is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use bag_core::ablation::{Preset, RenderSpec, VariantSpec};
use bag_core::data::SyntheticSetSpec;
use bag_core::evaluation::TimingSpec;
use bag_core::losses::{ExtractorSource, LossConfig};
use bag_core::training::TrainConfig;
use bag_core::{BagError, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Where `scripts/export_vgg19.py` writes the pretrained weights.
pub const DEFAULT_VGG_WEIGHTS: &str = "weights/vgg19_features.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    /// Ablation preset name, e.g. `BAG` or `Model Plain`.
    pub preset: String,
    pub module_count: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            preset: Preset::Bag.name().into(),
            module_count: 4,
        }
    }
}

impl ModelSettings {
    pub fn variant(&self) -> Result<VariantSpec> {
        let spec = VariantSpec {
            module_count: self.module_count,
            ..Preset::from_name(&self.preset)?.spec()
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSettings {
    /// A safetensors path, or `random:<seed>` for the untrained stand-in.
    pub source: String,
    /// Expected sha256 of the weights; falls back to a `.sha256` sidecar.
    pub sha256: Option<String>,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        Self {
            source: DEFAULT_VGG_WEIGHTS.into(),
            sha256: None,
        }
    }
}

impl ExtractorSettings {
    pub fn source(&self) -> Result<ExtractorSource> {
        Ok(match self.source.parse()? {
            ExtractorSource::Weights { path, .. } => ExtractorSource::Weights {
                path,
                sha256: self.sha256.clone(),
            },
            random => random,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub root: Option<PathBuf>,
    /// Keep decoded training pairs in memory after first use.
    pub cache: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            root: None,
            cache: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub extractor: ExtractorSettings,
    pub data: DataSettings,
    pub eval: TimingSpec,
    pub render: RenderSpec,
    pub synth: SyntheticSetSpec,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("leaf keys never prefix other keys");
            }
        }
    }
    Value::Object(root)
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| BagError::Config(format!("expected key=value, got `{text}`")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Builds effective settings: defaults, then `file`, then `overrides` in order.
#[derive(Clone, Debug)]
pub struct Layered {
    flat: BTreeMap<String, Value>,
    explicit: BTreeSet<String>,
}

impl Layered {
    pub fn new() -> Self {
        let mut flat = BTreeMap::new();
        let defaults = serde_json::to_value(Settings::default()).expect("settings serialize");
        flatten("", &defaults, &mut flat);
        Self {
            flat,
            explicit: BTreeSet::new(),
        }
    }

    /// Whether a file or override has set `key`.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.flat.get_mut(key) {
            Some(slot) => {
                *slot = value;
                self.explicit.insert(key.to_string());
                Ok(())
            }
            None => {
                let section = key.split('.').next().unwrap_or_default();
                let known: Vec<&str> = self
                    .flat
                    .keys()
                    .filter(|k| k.split('.').next() == Some(section))
                    .map(String::as_str)
                    .collect();
                let hint = if known.is_empty() {
                    String::new()
                } else {
                    format!(" (keys in `{section}`: {})", known.join(", "))
                };
                Err(BagError::Config(format!("unknown config key `{key}`{hint}")))
            }
        }
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BagError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                parse_assignment(line).map_err(|e| BagError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            self.set(&k, v)
                .map_err(|e| BagError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn settings(&self) -> Result<Settings> {
        let value = unflatten(&self.flat);
        serde_path_to_error::deserialize(value)
            .map_err(|e| BagError::Config(format!("config key `{}`: {}", e.path(), e.inner())))
    }
}

/// One `key = value` line per leaf, sorted; reloadable with `--config`.
pub fn echo(settings: &Settings) -> String {
    let mut flat = BTreeMap::new();
    flatten(
        "",
        &serde_json::to_value(settings).expect("settings serialize"),
        &mut flat,
    );
    flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
