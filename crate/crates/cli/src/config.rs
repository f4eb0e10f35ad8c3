//! Command configurations and `--section.key value` overrides.
//!
//! A configuration is resolved in three layers: built-in defaults, then the
//! TOML file (missing keys keep their defaults), then command-line
//! overrides. Unknown keys are errors at every layer.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dkl_core::data::{gaussian_mixture, load_csv, split, Dataset};
use dkl_core::gradcheck::VerifyOptions;
use dkl_core::trainers::{AttackConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file to load; empty selects the synthetic Gaussian mixture.
    pub csv: String,
    /// Min-max rescale CSV features instead of rejecting values outside
    /// `[0, 1]`.
    pub rescale: bool,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: String::new(),
            rescale: false,
            classes: 10,
            dim: 16,
            n_per_class: 200,
            spread: 0.2,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let full = if self.csv.is_empty() {
            gaussian_mixture(self.classes, self.dim, self.n_per_class, self.spread, self.seed)?
        } else {
            load_csv(Path::new(&self.csv), self.rescale)?
        };
        Ok(split(&full, self.test_fraction, self.seed)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// `DKLL` file with one row of teacher logits per train row.
    pub teacher_logits: String,
    /// `DKLM` teacher network, evaluated on the train split.
    pub teacher_params: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub params: String,
    /// Optional class statistics table for `margins`.
    pub stats: String,
    pub split: SplitChoice,
    pub attack_enabled: bool,
    pub margins: bool,
    pub seed: u64,
    pub data: DataConfig,
    pub attack: AttackConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            params: String::new(),
            stats: String::new(),
            split: SplitChoice::Test,
            attack_enabled: true,
            margins: false,
            seed: 0,
            data: DataConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub classes: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            classes: vec![2, 10, 100, 1000],
            batch: 64,
            repeats: 1,
            seed: 0,
            tolerance: 1e-10,
        }
    }
}

pub type VerifyConfig = VerifyOptions;

/// Splits `--section.key value` and `--section.key=value` pairs out of
/// `args`. Everything else is returned untouched, in order.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let key_part = body.split('=').next().unwrap_or_default();
        let is_override = key_part.contains('.')
            && key_part
                .split('.')
                .all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if !is_override {
            rest.push(arg);
            continue;
        }
        match body.split_once('=') {
            Some((key, value)) => overrides.push((key.to_string(), value.to_string())),
            None => {
                let value = iter
                    .next()
                    .with_context(|| format!("override --{body} needs a value"))?;
                overrides.push((body.to_string(), value));
            }
        }
    }
    Ok((rest, overrides))
}

/// Parses a flag value as a TOML value; anything that is not valid TOML is
/// taken as a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_overrides(table: &mut toml::Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("split yields at least one part");
        let mut cur = &mut *table;
        for part in parts {
            let entry = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = match entry {
                toml::Value::Table(t) => t,
                _ => bail!("--{key}: `{part}` is not a section"),
            };
        }
        cur.insert(leaf.to_string(), parse_value(raw));
    }
    Ok(())
}

/// Resolves a configuration: defaults, then `text` (if any, read from
/// `origin`), then `overrides`.
pub fn resolve<T>(text: Option<(&str, &Path)>, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match text {
        Some((text, origin)) => toml::from_str(text)
            .with_context(|| format!("invalid configuration in {}", origin.display()))?,
        None => T::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut table = toml::Table::try_from(&base).context("serializing configuration")?;
    apply_overrides(&mut table, overrides)?;
    toml::Value::Table(table)
        .try_into()
        .context("invalid command-line override")
}

pub fn read_config<T>(path: &Path, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    resolve(Some((&text, path)), overrides)
}

/// `--out` if given, else `$DKL_OUT_DIR/<name>`, else `runs/<name>`.
pub fn output_dir(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let base = std::env::var_os("DKL_OUT_DIR")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        base.join(name)
    })
}
