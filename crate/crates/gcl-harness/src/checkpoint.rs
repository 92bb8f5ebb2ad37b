//! Versioned per-seed checkpoints taken at batch boundaries.

use std::path::Path;

use gcl_core::engine::RunState;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub batches: usize,
    pub state: RunState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, state: &RunState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seed: state.seed,
            batches: state.cursor.batches_emitted(),
            state: state.clone(),
        }
    }
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_vec(checkpoint)?;
    std::fs::write(&tmp, json).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Loads a checkpoint written for `config` and `seed`. The format version
/// is checked before anything else is decoded.
pub fn load(path: &Path, config: &RunConfig, seed: u64) -> Result<Checkpoint> {
    let fail = |message: String| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| fail(e.to_string()))?;
    let version = value.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        let found = version.map_or_else(|| "none".to_string(), |v| v.to_string());
        return Err(fail(format!(
            "format version {found} cannot be read by this build (version {CHECKPOINT_VERSION})"
        )));
    }
    let checkpoint: Checkpoint = serde_json::from_value(value).map_err(|e| fail(e.to_string()))?;
    let expected = config.hash();
    if checkpoint.config_hash != expected {
        return Err(fail(format!(
            "config hash {} does not match the current config {expected}",
            checkpoint.config_hash
        )));
    }
    if checkpoint.seed != seed || checkpoint.state.seed != seed {
        return Err(fail(format!("written for seed {}, not {seed}", checkpoint.seed)));
    }
    Ok(checkpoint)
}
