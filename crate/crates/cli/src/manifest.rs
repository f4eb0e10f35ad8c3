//! The run manifest written next to every command's outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Subcommand path, e.g. `["train", "adversarial"]`.
    pub command: Vec<String>,
    pub seed: u64,
    /// UTC time the run was first made; replays keep it.
    pub created: String,
    /// Fully resolved configuration of the command.
    pub config: toml::Table,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &[&str], seed: u64, created: String, config: &T) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.iter().map(|s| s.to_string()).collect(),
            seed,
            created,
            config: toml::Table::try_from(config).context("serializing configuration")?,
        })
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        toml::Value::Table(self.config.clone())
            .try_into()
            .context("manifest configuration does not match the command")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        fs::write(dir.join(FILE_NAME), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
    }
}

/// `SOURCE_DATE_EPOCH` when set, else the current time, as RFC 3339 UTC.
pub fn timestamp() -> Result<String> {
    let when: DateTime<Utc> = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(raw) if !raw.is_empty() => {
            let secs: i64 = raw
                .trim()
                .parse()
                .with_context(|| format!("SOURCE_DATE_EPOCH is not an integer: {raw}"))?;
            DateTime::from_timestamp(secs, 0).context("SOURCE_DATE_EPOCH out of range")?
        }
        _ => Utc::now(),
    };
    Ok(when.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}
