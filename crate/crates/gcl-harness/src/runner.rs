//! Multi-seed execution.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gcl_core::engine::{Engine, RunOutput};
use gcl_core::stream::{FeatureSource, SyntheticBackbone};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::features::read_feature_file;

pub type Source = Box<dyn FeatureSource + Sync>;

pub fn build_source(config: &RunConfig) -> Result<Source> {
    match &config.features {
        Some(path) => {
            let table = read_feature_file(path)?;
            if table.num_classes() != config.model.stream.num_classes {
                return Err(HarnessError::Config(format!(
                    "{} declares {} classes but stream.num_classes is {}",
                    path.display(),
                    table.num_classes(),
                    config.model.stream.num_classes
                )));
            }
            Ok(Box::new(table))
        }
        None => Ok(Box::new(SyntheticBackbone::new(config.synthetic()))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from existing per-seed checkpoints.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub numerical: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: std::result::Result<RunOutput, Failure>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
}

impl RunResult {
    pub fn failures(&self) -> Vec<&Failure> {
        self.seeds.iter().filter_map(|s| s.outcome.as_ref().err()).collect()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &RunOutput> {
        self.seeds.iter().filter_map(|s| s.outcome.as_ref().ok())
    }
}

pub fn checkpoint_path(config: &RunConfig, seed: u64) -> PathBuf {
    config.run_dir().join("checkpoints").join(format!("seed-{seed}.json"))
}

/// Runs every seed, in parallel. A failing seed is recorded and the others
/// carry on.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunResult> {
    config.validate()?;
    let source = build_source(config)?;
    let seeds = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let outcome = run_one(config, source.as_ref(), seed, options).map_err(|e| Failure {
                seed,
                numerical: e.exit_code() == 2,
                message: e.to_string(),
            });
            SeedResult {
                seed,
                outcome,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    Ok(RunResult {
        run_id: config.resolved_run_id(),
        config: config.clone(),
        config_hash: config.hash(),
        seeds,
    })
}

fn run_one(config: &RunConfig, source: &dyn FeatureSource, seed: u64, options: &RunOptions) -> Result<RunOutput> {
    let path = checkpoint_path(config, seed);
    let mut engine = if options.resume && path.exists() {
        let ck = checkpoint::load(&path, config, seed)?;
        Engine::resume(&config.model, source, ck.state)?
    } else {
        Engine::new(&config.model, source, seed)?
    };
    while engine.step()? {
        if let Some(every) = config.checkpoint_every {
            if engine.state().cursor.batches_emitted() % every == 0 {
                save_checkpoint(&path, config, &engine)?;
            }
        }
    }
    Ok(engine.finish()?)
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, engine: &Engine<'_>) -> Result<()> {
    checkpoint::save(path, &Checkpoint::new(config, engine.state()))
}
