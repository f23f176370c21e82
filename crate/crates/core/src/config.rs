//! Run configuration: a TOML file with `[data]`, `[model]` and `[train]`
//! sections, plus `key=value` overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Directory holding `train.tsv` and `test.tsv`.
    pub data_dir: PathBuf,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            data_dir: PathBuf::from("data"),
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 3] = ["data", "model", "train"];

fn section_keys(section: &str) -> Vec<String> {
    let defaults = Value::try_from(RunConfig::default()).expect("default config serializes");
    defaults
        .get(section)
        .and_then(Value::as_table)
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default()
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` pairs. Keys are `section.field`, or a bare field name
/// when exactly one section has it.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let key = key.trim();
        let (section, field) = match key.split_once('.') {
            Some((s, f)) if SECTIONS.contains(&s) => (s.to_string(), f.to_string()),
            Some(_) => return Err(Error::Config(format!("unknown config section in `{key}`"))),
            None => {
                let owners: Vec<&str> = SECTIONS
                    .into_iter()
                    .filter(|s| section_keys(s).iter().any(|k| k == key))
                    .collect();
                match owners.as_slice() {
                    [one] => (one.to_string(), key.to_string()),
                    [] => return Err(Error::Config(format!("unknown config key `{key}`"))),
                    many => {
                        return Err(Error::Config(format!(
                            "key `{key}` is ambiguous, qualify it with one of {}",
                            many.join(", ")
                        )))
                    }
                }
            }
        };
        if !section_keys(&section).contains(&field) {
            return Err(Error::Config(format!("unknown config key `{section}.{field}`")));
        }
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        let sec = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{section}` must be a table")))?;
        sec.insert(field, parse_value(raw.trim()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()
    }

    /// The fully resolved configuration as TOML text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
