//! Ablation grids: one base config, one axis varied at a time.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use gcl_core::engine::RoutingAlgorithm;
use gcl_core::ensemble::Aggregation;
use gcl_core::experts::{MaskKind, SpawnPolicy};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::output::{self, cell, mean_std, metric_row, METRIC_COLUMNS};
use crate::runner::{self, RunOptions, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Router, experts and EMA bank each on or off.
    Components,
    Aggregation,
    Decays,
    Mask,
    RoutingAlg,
    MSweep,
    LambdaSweep,
    RdSweep,
    RbSweep,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::Components,
        Axis::Aggregation,
        Axis::Decays,
        Axis::Mask,
        Axis::RoutingAlg,
        Axis::MSweep,
        Axis::LambdaSweep,
        Axis::RdSweep,
        Axis::RbSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Aggregation => "aggregation",
            Axis::Decays => "decays",
            Axis::Mask => "mask",
            Axis::RoutingAlg => "routing_alg",
            Axis::MSweep => "M_sweep",
            Axis::LambdaSweep => "lambda_sweep",
            Axis::RdSweep => "rd_sweep",
            Axis::RbSweep => "rb_sweep",
        }
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
                HarnessError::Config(format!("unknown axis `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

pub const M_VALUES: [usize; 4] = [64, 256, 1024, 4096];
pub const LAMBDA_VALUES: [f64; 5] = [1e0, 1e2, 1e3, 1e4, 1e6];
pub const RD_VALUES: [f64; 3] = [0.0, 0.5, 1.0];
pub const RB_VALUES: [f64; 4] = [0.0, 0.1, 0.3, 0.5];

fn label<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::from("?"),
    }
}

/// The cells of `axis` as (label, config) pairs derived from `base`.
pub fn cells(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Components => {
            let mut out = Vec::new();
            for router in [true, false] {
                for experts in [true, false] {
                    for ema in [true, false] {
                        let name = if router && experts && ema {
                            "full".to_string()
                        } else {
                            format!(
                                "router={} experts={} ema={}",
                                on_off(router),
                                on_off(experts),
                                on_off(ema)
                            )
                        };
                        out.push((
                            name,
                            with(&|c| {
                                if !router {
                                    c.model.routing = RoutingAlgorithm::Latest;
                                }
                                if !experts {
                                    c.model.spawn = SpawnPolicy::Single;
                                }
                                if !ema {
                                    c.model.ema_decays.clear();
                                }
                            }),
                        ));
                    }
                }
            }
            out
        }
        Axis::Aggregation => Aggregation::ALL
            .iter()
            .map(|&a| (label(&a), with(&|c| c.model.aggregation = a)))
            .collect(),
        Axis::Decays => {
            let sets: [&[f64]; 5] = [&[], &[0.9], &[0.99], &[0.9, 0.99], &[0.5, 0.9, 0.99, 0.999]];
            sets.iter()
                .map(|s| (label(&s), with(&|c| c.model.ema_decays = s.to_vec())))
                .collect()
        }
        Axis::Mask => [
            MaskKind::None,
            MaskKind::Random,
            MaskKind::SeenClass,
            MaskKind::BatchSeenClass,
        ]
        .iter()
        .map(|&m| (label(&m), with(&|c| c.model.mask = m)))
        .collect(),
        Axis::RoutingAlg => RoutingAlgorithm::ALL
            .iter()
            .map(|&r| (label(&r), with(&|c| c.model.routing = r)))
            .collect(),
        Axis::MSweep => M_VALUES
            .iter()
            .map(|&m| (m.to_string(), with(&|c| c.model.expansion_dim = m)))
            .collect(),
        Axis::LambdaSweep => LAMBDA_VALUES
            .iter()
            .map(|&l| (l.to_string(), with(&|c| c.model.lambda = l)))
            .collect(),
        Axis::RdSweep => RD_VALUES
            .iter()
            .map(|&r| (r.to_string(), with(&|c| c.model.stream.disjoint_ratio = r)))
            .collect(),
        Axis::RbSweep => RB_VALUES
            .iter()
            .map(|&r| (r.to_string(), with(&|c| c.model.stream.blurry_ratio = r)))
            .collect(),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[derive(Debug)]
pub struct AblationResult {
    pub axis: Axis,
    pub cells: Vec<(String, RunResult)>,
}

/// Runs every cell of `axis` over the seeds of `base`.
pub fn run(base: &RunConfig, axis: Axis) -> Result<AblationResult> {
    base.validate()?;
    let cells = cells(base, axis)
        .into_iter()
        .map(|(name, config)| Ok((name, runner::run(&config, &RunOptions::default())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResult { axis, cells })
}

/// Writes `ablate_<axis>.csv` into the run directory of `base` (one row per
/// cell and seed, then a mean and a std row per cell) and `ablate_<axis>.json`
/// with the resolved config of every cell.
pub fn write(base: &RunConfig, result: &AblationResult) -> Result<PathBuf> {
    let dir = base.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let path = dir.join(format!("ablate_{}.csv", result.axis.name()));
    write_csv(&path, result)?;
    let cells: Vec<serde_json::Value> = result
        .cells
        .iter()
        .map(|(name, run)| serde_json::json!({"cell": name, "config_hash": run.config_hash, "config": run.config}))
        .collect();
    let meta = serde_json::json!({
        "axis": result.axis.name(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "cells": cells,
        "notes": output::notes(),
    });
    output::write_json(&path.with_extension("json"), &meta)?;
    Ok(path)
}

fn write_csv(path: &Path, result: &AblationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(format!("{}: {e}", path.display())))?;
    let mut header = vec!["cell", "seed", "status"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for (name, run) in &result.cells {
        let mut rows = Vec::new();
        for seed in &run.seeds {
            let mut record = vec![name.clone(), seed.seed.to_string()];
            match &seed.outcome {
                Ok(out) => {
                    let row = metric_row(out);
                    record.push("ok".into());
                    record.extend(row.iter().map(|v| cell(*v)));
                    rows.push(row);
                }
                Err(_) => {
                    record.push("failed".into());
                    record.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len()));
                }
            }
            w.write_record(&record)?;
        }
        let stats: Vec<_> = (0..METRIC_COLUMNS.len())
            .map(|c| mean_std(rows.iter().map(|r| r[c])))
            .collect();
        for (tag, std) in [("mean", false), ("std", true)] {
            let mut record = vec![name.clone(), tag.to_string(), String::new()];
            record.extend(stats.iter().map(|s| cell(if std { s.1 } else { s.0 })));
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
