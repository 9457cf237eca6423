//! Top-level run configuration (TOML) and `key=value` overrides.
//!
//! ```toml
//! [train]
//! epochs = 2
//! [train.weights]
//! w_s = 5.0
//! [[train.styles]]
//! style_id = "plastic_waste"
//! image = "styles/plastic.jpg"
//! [sweep]
//! [service]
//! [bench]
//! ```
//!
//! Overrides use dotted paths (`train.weights.beta=8`). A path whose first
//! segment is not a section is looked up under `train` (`epochs=1` means
//! `train.epochs=1`). Unknown keys are errors, both in files and overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::service::{Preset, Resolution, ServiceConfig};
use crate::trainer::{SweepConfig, TrainConfig};

pub const SECTIONS: [&str; 4] = ["train", "sweep", "service", "bench"];

/// Serde aliases under `weights`, rewritten to their field names so an
/// override replaces the value rather than duplicating it.
const WEIGHT_ALIASES: [(&str, &str); 2] = [("w_c", "alpha"), ("w_s", "beta")];

fn default_bench_resolutions() -> Vec<Resolution> {
    Preset::ALL.iter().map(|&p| Resolution::Preset(p)).collect()
}
fn default_repeats() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_resolutions")]
    pub resolutions: Vec<Resolution>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Photo to stylise; a procedural 1080×1920 scene when unset.
    #[serde(default)]
    pub source_image: Option<PathBuf>,
    /// Memory ceiling for the out-of-memory guard; available memory when
    /// unset.
    #[serde(default)]
    pub memory_limit_mb: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { resolutions: default_bench_resolutions(), repeats: default_repeats(), source_image: None, memory_limit_mb: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub service: ServiceConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl Config {
    /// Parse `text`, apply `overrides` in order, validate the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(value, overrides)
    }

    fn from_table(mut value: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Load from a file. Relative paths written in the file resolve against
    /// its directory; paths given in `overrides` are taken as they are.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &[])?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        if overrides.is_empty() {
            return Ok(cfg);
        }
        let table = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    /// Join every relative path in the config onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train.content_dir);
        for s in &mut self.train.style_specs {
            fix(&mut s.image_path);
        }
        if let Some(p) = self.train.backbone.weights.as_mut() {
            fix(p);
        }
        if let Some(p) = self.sweep.held_out_dir.as_mut() {
            fix(p);
        }
        fix(&mut self.service.checkpoint);
        if let Some(p) = self.bench.source_image.as_mut() {
            fix(p);
        }
    }

    /// Canonical TOML of the resolved config.
    pub fn resolved(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply one `key=value` override to a parsed table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let mut path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    if !SECTIONS.contains(&path[0]) {
        path.insert(0, "train");
    }
    if path.len() >= 2 && path[path.len() - 2] == "weights" {
        let leaf = path.last_mut().expect("non-empty path");
        if let Some((_, field)) = WEIGHT_ALIASES.iter().find(|(a, _)| a == leaf) {
            *leaf = field;
        }
    }
    check_known(&path).map_err(|_| Error::Config(format!("unknown config key `{}` in override `{spec}`", path.join("."))))?;
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{seg}` in `{key}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Err when `path` names no field of [`Config`]. Checked against the serde
/// schema itself, so aliases are honoured.
fn check_known(path: &[&str]) -> std::result::Result<(), ()> {
    let defaults = toml::Value::try_from(Config::default()).map_err(|_| ())?;
    let mut probe = defaults.as_table().cloned().ok_or(())?;
    let mut cur = &mut probe;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or(())?;
    }
    let leaf = path[path.len() - 1];
    if cur.contains_key(leaf) {
        return Ok(());
    }
    // Unset optional fields are absent from the serialised defaults. Insert a
    // string sentinel: a type error means the field exists, "unknown field"
    // means it does not.
    cur.insert(leaf.to_string(), toml::Value::String("\u{0}probe".into()));
    match toml::Value::Table(probe).try_into::<Config>() {
        Ok(_) => Ok(()),
        Err(e) if e.to_string().contains("unknown field") => Err(()),
        Err(_) => Ok(()),
    }
}
