//! On-disk layout of data and training directories and config layering.

use std::fs;
use std::path::{Path, PathBuf};

use occflow::config::{DataConfig, ExperimentConfig};
use occflow::scenario::{load_scenario, Scenario};
use occflow::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{ConfigArgs, Preset, Split};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.safetensors";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub version: u32,
    pub data: DataConfig,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

impl DataManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Scenario>> {
    let m = DataManifest::load(dir)?;
    m.entries(split)
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            load_scenario(&path).map_err(|err| Error::Data(format!("{}: {err}", path.display())))
        })
        .collect()
}

fn preset_config(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Paper => ExperimentConfig::paper(),
        Preset::Desk => ExperimentConfig::desk(),
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn layer_file(base: &ExperimentConfig, path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let top: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message().replace('\n', " "))))?;
    let mut root = toml::Value::try_from(base).map_err(|e| Error::Serde(e.to_string()))?;
    merge(&mut root, top);
    // re-serialize so unknown keys are reported by the strict parser
    let merged = toml::to_string(&root).map_err(|e| Error::Serde(e.to_string()))?;
    ExperimentConfig::from_toml(&merged).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}; valid keys: {}", path.display(), base.keys().join(", "))),
        other => other,
    })
}

/// Preset, then the config file, then `--set` overrides.
pub fn resolve(args: &ConfigArgs, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = base.unwrap_or_else(|| preset_config(args.preset));
    if let Some(p) = &args.config {
        cfg = layer_file(&cfg, p)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

pub fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!("{} is not empty; pass --force to write into it", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn ensure_new_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Config and checkpoint path of a training output directory.
pub fn model_dir(dir: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(dir.join(CONFIG))?;
    let ck = dir.join(CHECKPOINT);
    if !ck.is_file() {
        return Err(Error::Data(format!("{} not found", ck.display())));
    }
    Ok((cfg, ck))
}
