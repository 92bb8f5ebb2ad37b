//! Run configuration: defaults, a TOML file, then `--key=value` overrides.

use std::path::{Path, PathBuf};

use gcl_core::engine::EngineConfig;
use gcl_core::stream::SyntheticConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Synthetic frozen-feature backbone. Class count and samples per class
/// come from `stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub dim: usize,
    pub cluster_spread: f64,
    pub noise_scale: f64,
    pub long_tail_exponent: f64,
    /// Shared by every run seed.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            dim: s.dim,
            cluster_spread: s.cluster_spread,
            noise_scale: s.noise_scale,
            long_tail_exponent: s.long_tail_exponent,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub outdir: PathBuf,
    /// Output subdirectory; empty means `run-<first 12 hex digits of the config hash>`.
    pub run_id: String,
    /// Feature file to stream instead of the synthetic backbone.
    pub features: Option<PathBuf>,
    pub backbone: BackboneConfig,
    /// Write a per-seed checkpoint every this many batches.
    pub checkpoint_every: Option<usize>,
    #[serde(flatten)]
    pub model: EngineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            outdir: PathBuf::from("runs"),
            run_id: String::new(),
            features: None,
            backbone: BackboneConfig::default(),
            checkpoint_every: None,
            model: EngineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (each `--key=value` or
    /// `key=value`, dotted keys for nested tables, values in TOML syntax with
    /// bare words read as strings).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = serde_json::to_value(Self::default())?;
        let mut merged = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            let value = serde_json::to_value(table)?;
            check_known(&value, &defaults, "")?;
            merge(&mut merged, value);
        }
        for raw in overrides {
            let value = parse_override(raw)?;
            check_known(&value, &defaults, "")?;
            merge(&mut merged, value);
        }
        let config: Self = serde_json::from_value(merged).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(HarnessError::Config("checkpoint_every must be positive".into()));
        }
        if self.backbone.dim == 0 {
            return Err(HarnessError::Config("backbone.dim must be positive".into()));
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            dim: self.backbone.dim,
            num_classes: self.model.stream.num_classes,
            samples_per_class: self.model.stream.samples_per_class,
            cluster_spread: self.backbone.cluster_spread,
            noise_scale: self.backbone.noise_scale,
            long_tail_exponent: self.backbone.long_tail_exponent,
            seed: self.backbone.seed,
        }
    }

    /// SHA-256 over everything that determines a seed's results.
    pub fn hash(&self) -> String {
        let relevant = serde_json::json!({
            "model": self.model,
            "backbone": self.backbone,
            "features": self.features,
        });
        let digest = Sha256::digest(relevant.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved_run_id(&self) -> String {
        if self.run_id.is_empty() {
            format!("run-{}", &self.hash()[..12])
        } else {
            self.run_id.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.outdir.join(self.resolved_run_id())
    }
}

fn parse_override(raw: &str) -> Result<Value> {
    let body = raw.strip_prefix("--").unwrap_or(raw);
    let (key, text) = body
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{raw}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!("override `{raw}` has an empty key")));
    }
    let leaf = match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key just parsed"))?,
        Err(_) => Value::String(text.to_string()),
    };
    Ok(key.rsplit('.').fold(leaf, |inner, part| {
        Value::Object(Map::from_iter([(part.to_string(), inner)]))
    }))
}

fn check_known(value: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(new), Value::Object(known)) = (value, defaults) else {
        return Ok(());
    };
    for (k, v) in new {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match known.get(k) {
            None => return Err(HarnessError::Config(format!("unknown key `{path}`"))),
            Some(d) => check_known(v, d, &path)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, new: Value) {
    match (base, new) {
        (Value::Object(b), Value::Object(n)) => {
            for (k, v) in n {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
