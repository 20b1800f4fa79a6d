//! Run configuration: one TOML document with a section per concern, plus
//! dotted `key=value` overrides applied before deserialization.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hcpo_core::envlab::EnvConfig;
use hcpo_core::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

/// Everything a subcommand needs, with every default filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a checkpoint every this many iterations (0: initial and final only).
    pub checkpoint_interval: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { checkpoint_interval: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Number of random instances for the `lemmas` and `bounds` suites.
    pub seed_count: u64,
    /// Scale of the logit perturbation producing the new policy in `bounds`;
    /// zero compares every policy with itself.
    pub perturbation: f64,
    /// Decreases of the exact objective smaller than this are not counted.
    pub tolerance: f64,
    /// Smallest acceptable fraction of non-decreasing accepted iterations.
    pub min_fraction: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed_count: 100,
            perturbation: 0.5,
            tolerance: 1e-3,
            min_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// Instruction counts to sweep; empty uses `train.k`.
    pub k_values: Vec<usize>,
    pub seeds: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: vec![Variant::Hcpo, Variant::NoConductor, Variant::RandomConductor, Variant::CentralizedExec],
            k_values: Vec::new(),
            seeds: 5,
        }
    }
}

/// Reads the config document (TOML, or the `config` field of a run manifest
/// when the file ends in `.json`), applies overrides, and deserializes.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                from_manifest(&text).with_context(|| format!("invalid run manifest {}", p.display()))?
            } else {
                text.parse::<toml::Table>()
                    .with_context(|| format!("cannot parse config file {}", p.display()))?
            }
        }
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid configuration: {}", e.message()))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn from_manifest(text: &str) -> Result<toml::Table> {
    let manifest: serde_json::Value = serde_json::from_str(text)?;
    let config = manifest.get("config").ok_or_else(|| anyhow!("manifest has no config field"))?;
    let cfg: RunConfig = serde_json::from_value(config.clone())?;
    match toml::Value::try_from(&cfg)? {
        toml::Value::Table(t) => Ok(t),
        _ => bail!("config is not a table"),
    }
}

/// Sets `a.b.c=value` in the document. The value is read as a TOML value
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override {spec:?} has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {spec:?}: {p} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
