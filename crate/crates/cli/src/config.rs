//! Flat `key = value` experiment files. Flags override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const KEYS: &[&str] = &[
    "regime",
    "strategy",
    "variant",
    "noise",
    "seed",
    "n",
    "data",
    "out",
    "checkpoint",
    "phase",
    "d",
    "lr",
    "stage1_epochs",
    "stage2_epochs",
    "batch_size",
    "aux_weight_cyclic",
    "aux_weight_joint",
    "lambda",
    "tau",
    "val_limit",
];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value", i + 1);
            };
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                bail!("line {}: unknown key '{key}'", i + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// The flag when given, else the parsed file value.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key '{key}': cannot parse '{v}': {e}")),
        }
    }
}
