//! Layered run configuration: preset defaults, then a TOML file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use iced_core::designers::Method;
use iced_core::driver::TrainConfig;
use iced_core::levelgen::GenConfig;
use iced_core::vae::{VaeConfig, VaeScale};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

/// Sizes and generator settings of the dataset family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_levels: usize,
    pub test_levels: usize,
    pub edge_levels: usize,
    pub large_levels: usize,
    /// Area multiplier of the large set.
    pub large_scale: usize,
    pub generator: GenConfig,
}

impl DatasetConfig {
    pub fn preset(preset: Preset) -> Self {
        let (side, train) = match preset {
            Preset::Desk => (9, 64),
            Preset::Full => (15, 512),
        };
        DatasetConfig {
            train_levels: train,
            test_levels: 200,
            edge_levels: 100,
            large_levels: 100,
            large_scale: 9,
            generator: GenConfig {
                height: side,
                width: side,
                ..GenConfig::default()
            },
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::preset(Preset::Desk)
    }
}

/// Everything a config file may set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => FileConfig {
                dataset: DatasetConfig::preset(preset),
                vae: VaeConfig::for_scale(VaeScale::Desk),
                train: TrainConfig::desk(Method::Uniform),
            },
            Preset::Full => FileConfig {
                dataset: DatasetConfig::preset(preset),
                vae: VaeConfig::for_scale(VaeScale::Full),
                train: TrainConfig::full(Method::Uniform),
            },
        }
    }

    /// Preset values overlaid with the keys present in `path`.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = FileConfig::preset(preset);
        let Some(path) = path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = toml::Table::try_from(&base).context("serializing preset")?;
        overlay(&mut merged, file);
        FileConfig::deserialize(toml::Value::Table(merged))
            .map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message()))
    }

    /// An existing run's `config.json` as the training section.
    pub fn train_from_json(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Recursively replaces values of `base` with those of `file`. Unknown keys are
/// carried over so that deserialization names them.
fn overlay(base: &mut toml::Table, file: toml::Table) {
    for (k, v) in file {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(f)) => overlay(b, f),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `name=path` or a bare path (named by its file stem).
pub fn parse_named_path(spec: &str) -> Result<(String, std::path::PathBuf)> {
    if let Some((name, path)) = spec.split_once('=') {
        if name.is_empty() || path.is_empty() {
            bail!("eval set {spec:?} must look like name=path");
        }
        return Ok((name.to_string(), path.into()));
    }
    let path = std::path::PathBuf::from(spec);
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("eval set {spec:?} has no file name"))?
        .to_string();
    Ok((name, path))
}
