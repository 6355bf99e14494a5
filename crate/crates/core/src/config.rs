//! Experiment configuration: one TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{short_hex, IngestOptions, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::ExampleConfig;
use crate::training::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmazonSpec {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default = "default_min_rating")]
    pub min_rating: u8,
    #[serde(default = "default_min_source_len")]
    pub min_source_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_min_rating() -> u8 {
    IngestOptions::default().min_rating
}

fn default_min_source_len() -> usize {
    IngestOptions::default().min_source_len
}

fn default_max_len() -> usize {
    IngestOptions::default().max_len
}

impl AmazonSpec {
    pub fn options(&self) -> IngestOptions {
        IngestOptions {
            min_rating: self.min_rating,
            min_source_len: self.min_source_len,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Amazon(AmazonSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::Synthetic(_) => "synthetic",
            DatasetSpec::Amazon(_) => "amazon",
        }
    }
}

/// Settings of the ablation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    /// Experiment seeds; empty means just the top-level seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: vec!["table3".into()],
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub examples: ExampleConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: None,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            examples: ExampleConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Parses `text` (may be empty) and applies `overrides` of the form
    /// `a.b.c=value`, where `value` is read as a TOML value and otherwise
    /// taken as a string.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
            if self.model.encoder.positional && s.max_len > self.model.encoder.max_len {
                return Err(Error::config(format!(
                    "dataset.max_len {} exceeds model.encoder.max_len {}",
                    s.max_len, self.model.encoder.max_len
                )));
            }
        }
        if let DatasetSpec::Amazon(a) = &self.dataset {
            if !(1..=5).contains(&a.min_rating) {
                return Err(Error::config("dataset.min_rating must be in [1, 5]"));
            }
        }
        if !(0.0..1.0).contains(&self.examples.holdout_fraction) {
            return Err(Error::config("examples.holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form without `out`, 16 hex chars.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        short_hex(&Sha256::digest(&json))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
