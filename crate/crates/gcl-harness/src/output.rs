//! Run directory layout and file writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gcl_core::engine::RunOutput;
use gcl_core::metrics::MetricSet;
use serde_json::{json, Value};

use crate::error::{HarnessError, Result};
use crate::runner::RunResult;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SESSION_MATRIX_FILE: &str = "session_matrix.csv";
pub const ANYTIME_FILE: &str = "anytime.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const TIMING_FILE: &str = "timing.json";
pub const FAILURES_FILE: &str = "failures.json";

/// Columns of `metrics.csv` after `seed` and `status`.
pub const METRIC_COLUMNS: [&str; 10] = [
    "a_auc",
    "a_last",
    "a_avg",
    "f_last",
    "bwt",
    "routing_accuracy",
    "cka_mean",
    "num_experts",
    "oracle_fallbacks",
    "batches",
];

/// Numeric metric columns of one seed, in `METRIC_COLUMNS` order.
pub fn metric_row(out: &RunOutput) -> [Option<f64>; 10] {
    let m: [Option<f64>; 6] = out.metrics.values();
    [
        m[0],
        m[1],
        m[2],
        m[3],
        m[4],
        m[5],
        out.cka_mean,
        Some(out.num_experts as f64),
        Some(out.oracle_fallbacks as f64),
        Some(out.batches as f64),
    ]
}

/// Mean and sample standard deviation of the defined values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(format!("{}: {e}", path.display())))
}

/// Writes every output file of `result` into its run directory and returns
/// that directory.
pub fn write_run(result: &RunResult) -> Result<PathBuf> {
    let dir = result.config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    write_config(&dir.join(CONFIG_FILE), result)?;
    write_metrics(&dir.join(METRICS_FILE), result)?;
    write_session_matrix(&dir.join(SESSION_MATRIX_FILE), result)?;
    write_anytime(&dir.join(ANYTIME_FILE), result)?;
    write_predictions(&dir.join(PREDICTIONS_FILE), result)?;
    write_timing(&dir.join(TIMING_FILE), result)?;
    let failures = result.failures();
    let failures_path = dir.join(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).map_err(|e| HarnessError::io(&failures_path, e))?;
        }
    } else {
        write_json(&failures_path, &serde_json::to_value(&failures)?)?;
    }
    Ok(dir)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|()| w.flush())
        .map_err(|e| HarnessError::io(path, e))
}

/// Operational readings recorded next to every result.
pub fn notes() -> Value {
    json!({
        "anytime_evaluation": "held-out samples of the classes seen so far",
        "session_test_pool": "held-out samples of the classes a session owns: disjoint classes assigned to it and blurry classes homed in it",
        "router_off": "routing = latest: always the newest expert",
        "experts_off": "spawn = single: one adapter for the whole stream",
        "ema_off": "ema_decays = []: online head only",
    })
}

fn write_config(path: &Path, result: &RunResult) -> Result<()> {
    let value = json!({
        "run_id": result.run_id,
        "config_hash": result.config_hash,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config": result.config,
        "notes": notes(),
    });
    write_json(path, &value)
}

fn write_metrics(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["seed", "status"];
    header.extend(METRIC_COLUMNS);
    header.push("session_sizes");
    w.write_record(&header)?;
    let mut rows = Vec::new();
    for seed in &result.seeds {
        let mut record = vec![seed.seed.to_string()];
        match &seed.outcome {
            Ok(out) => {
                let row = metric_row(out);
                record.push("ok".into());
                record.extend(row.iter().map(|v| cell(*v)));
                let sizes: Vec<String> = out.session_sizes.iter().map(usize::to_string).collect();
                record.push(sizes.join(";"));
                rows.push(row);
            }
            Err(_) => {
                record.push("failed".into());
                record.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len() + 1));
            }
        }
        w.write_record(&record)?;
    }
    let stats: Vec<(Option<f64>, Option<f64>)> = (0..METRIC_COLUMNS.len())
        .map(|c| mean_std(rows.iter().map(|r| r[c])))
        .collect();
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let mut record = vec![label.to_string(), String::new()];
        record.extend(stats.iter().map(|s| cell(if pick == 0 { s.0 } else { s.1 })));
        record.push(String::new());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_session_matrix(path: &Path, result: &RunResult) -> Result<()> {
    let sessions = result.config.model.stream.sessions;
    let mut w = csv_writer(path)?;
    let mut header = vec!["seed".to_string(), "row".to_string()];
    header.extend((0..sessions).map(|j| format!("s{j}")));
    w.write_record(&header)?;
    for out in result.outputs() {
        for (i, row) in out.ledger.session_matrix.rows().iter().enumerate() {
            let mut record = vec![out.seed.to_string(), i.to_string()];
            record.extend((0..sessions).map(|j| cell(row.get(j).copied())));
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_anytime(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "step", "accuracy"])?;
    for out in result.outputs() {
        for (step, acc) in out.ledger.anytime.iter().enumerate() {
            w.write_record([out.seed.to_string(), step.to_string(), acc.to_string()])?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_predictions(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = create(path)?;
    for out in result.outputs() {
        for p in &out.predictions {
            let mut value = serde_json::to_value(p)?;
            if let Value::Object(map) = &mut value {
                map.insert("seed".into(), out.seed.into());
            }
            serde_json::to_writer(&mut w, &value)?;
            writeln!(w).map_err(|e| HarnessError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_timing(path: &Path, result: &RunResult) -> Result<()> {
    let seeds: Vec<Value> = result
        .seeds
        .iter()
        .map(|s| json!({"seed": s.seed, "seconds": s.seconds}))
        .collect();
    let total: f64 = result.seeds.iter().map(|s| s.seconds).sum();
    write_json(path, &json!({"seeds": seeds, "total_seconds": total}))
}

/// Reads `predictions.jsonl`, grouped by seed in file order.
pub fn read_predictions(path: &Path) -> Result<Vec<(u64, Vec<gcl_core::metrics::LoggedPrediction>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut groups: Vec<(u64, Vec<gcl_core::metrics::LoggedPrediction>)> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| HarnessError::Parse {
            path: path.to_path_buf(),
            offset: start,
            message,
        };
        let mut value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let seed = value
            .as_object_mut()
            .and_then(|m| m.remove("seed"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| parse_err("missing integer `seed`".into()))?;
        let record = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        match groups.last_mut() {
            Some((s, v)) if *s == seed => v.push(record),
            _ => groups.push((seed, vec![record])),
        }
    }
    Ok(groups)
}

/// Recomputed headline metrics per seed from logged predictions.
pub fn recompute_metrics(path: &Path, sessions: usize) -> Result<Vec<(u64, MetricSet)>> {
    read_predictions(path)?
        .into_iter()
        .map(|(seed, logs)| {
            let ledger = gcl_core::metrics::recompute_ledger(&logs, sessions)?;
            Ok((seed, ledger.metrics()))
        })
        .collect()
}
