//! Per-seed experiment driver and artifact persistence.
//!
//! Every run directory is self-describing: the config snapshot inside it
//! re-runs exactly that seed. A failing seed leaves a structured error
//! record behind and never takes down sibling seeds.

use crate::config::ExperimentConfig;
use crate::plots;
use fcil_core::client::Method;
use fcil_core::metrics::MetricReport;
use fcil_core::runtime::{RunOutput, Simulation};
use fcil_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub method: String,
    pub seed: u64,
    pub a_avg: f64,
    pub a_last: f64,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub mean_a_avg: f64,
    pub mean_a_last: f64,
    pub records: Vec<SeedRecord>,
    pub failures: Vec<SeedFailure>,
}

impl ExperimentSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Executes one seed end to end and persists its artifacts under `dir`.
pub fn run_seed(cfg: &ExperimentConfig, method: Method, seed: u64, dir: &Path) -> Result<SeedRecord> {
    std::fs::create_dir_all(dir)?;
    let mut snapshot = cfg.clone();
    snapshot.method = method.name().to_string();
    snapshot.seeds = vec![seed];
    snapshot.save(&dir.join("config.json"))?;

    let (train, test) = cfg.load_data(seed)?;
    let sim_cfg = cfg.simulation(method, seed)?;
    let mut sim = Simulation::new(sim_cfg, train, test)?;
    let out = sim.run_all()?;
    write_artifacts(dir, &out)?;
    validate_run_dir(dir, cfg.tasks)?;

    let report = out
        .report
        .as_ref()
        .ok_or_else(|| Error::invalid("tasks", "metrics need at least two tasks"))?;
    Ok(SeedRecord {
        method: method.name().to_string(),
        seed,
        a_avg: report.a_avg,
        a_last: report.a_last,
        dir: dir.display().to_string(),
    })
}

fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::write(dir.join("matrix.csv"), out.matrix.to_csv())?;
    let mut metrics = serde_json::to_string_pretty(&out.report)?;
    metrics.push('\n');
    std::fs::write(dir.join("metrics.json"), metrics)?;
    let mut run = serde_json::to_string_pretty(out)?;
    run.push('\n');
    std::fs::write(dir.join("run.json"), run)?;
    std::fs::write(dir.join("traces.csv"), traces_csv(out))?;
    emit_plots(dir, out)
}

fn traces_csv(out: &RunOutput) -> String {
    let mut csv = String::from("client,step,task,round,l_cond,l_rel,l_mkcl,l_total\n");
    for (client, rows) in &out.traces {
        for r in rows {
            csv.push_str(&format!(
                "{client},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.task, r.round, r.l_cond, r.l_rel, r.l_mkcl, r.l_total
            ));
        }
    }
    csv
}

/// Accuracy curve over completed tasks plus the client/class partition
/// heatmap accumulated across tasks.
pub fn emit_plots(dir: &Path, out: &RunOutput) -> Result<()> {
    let curve: Vec<f64> = (0..out.matrix.tasks())
        .map(|t| out.matrix.overall_at(t))
        .collect();
    let chart = plots::accuracy_chart("overall accuracy by stage", &[("run".into(), curve)]);
    std::fs::write(dir.join("accuracy_curve.svg"), chart)?;

    let mut merged: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut all_slots: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for per_client in out.partition_histograms.values() {
        for (&client, hist) in per_client {
            let row = merged.entry(client).or_default();
            for (&slot, &n) in hist {
                *row.entry(slot).or_insert(0) += n;
                all_slots.insert(slot);
            }
        }
    }
    let slots: Vec<usize> = all_slots.into_iter().collect();
    let row_labels: Vec<String> = merged.keys().map(|c| format!("client-{c}")).collect();
    let col_labels: Vec<String> = slots.iter().map(|s| format!("c{s}")).collect();
    let values: Vec<Vec<f64>> = merged
        .values()
        .map(|row| {
            slots
                .iter()
                .map(|s| *row.get(s).unwrap_or(&0) as f64)
                .collect()
        })
        .collect();
    let map = plots::heatmap(
        "training samples per client and class",
        &row_labels,
        &col_labels,
        &values,
    );
    std::fs::write(dir.join("partition_heatmap.svg"), map)?;
    Ok(())
}

/// Re-emits plots for an existing run directory from its saved output.
pub fn emit_plots_from_dir(dir: &Path) -> Result<()> {
    let raw = std::fs::read_to_string(dir.join("run.json"))?;
    let out: RunOutput = serde_json::from_str(&raw)?;
    emit_plots(dir, &out)
}

/// Machine validation of artifact completeness: required files exist, parse,
/// and the matrix has one row per task.
pub fn validate_run_dir(dir: &Path, tasks: usize) -> Result<()> {
    let config = std::fs::read_to_string(dir.join("config.json"))?;
    serde_json::from_str::<ExperimentConfig>(&config)?;

    let matrix = std::fs::read_to_string(dir.join("matrix.csv"))?;
    let rows: Vec<&str> = matrix.lines().collect();
    if rows.len() != tasks + 1 {
        return Err(Error::Format(format!(
            "matrix.csv has {} rows, expected header plus {tasks}",
            rows.len()
        )));
    }
    for (t, line) in rows.iter().skip(1).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != tasks {
            return Err(Error::Format(format!(
                "matrix.csv row {t} has {} cells, expected {tasks}",
                cells.len()
            )));
        }
        for cell in cells.iter().take(t + 1) {
            cell.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad matrix cell {cell:?}")))?;
        }
    }

    let metrics = std::fs::read_to_string(dir.join("metrics.json"))?;
    serde_json::from_str::<Option<MetricReport>>(&metrics)?;

    let traces = std::fs::read_to_string(dir.join("traces.csv"))?;
    if !traces.starts_with("client,step,task,round,") {
        return Err(Error::Format("traces.csv missing header".into()));
    }
    for name in ["accuracy_curve.svg", "partition_heatmap.svg", "run.json"] {
        let meta = std::fs::metadata(dir.join(name))?;
        if meta.len() == 0 {
            return Err(Error::Format(format!("{name} is empty")));
        }
    }
    Ok(())
}

/// Runs every seed for one method; failures become records, not aborts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    method_override: Option<Method>,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
    parallel: bool,
) -> Result<ExperimentSummary> {
    let method = match method_override {
        Some(m) => m,
        None => cfg.method()?,
    };
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let root = out_override.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let method_dir = root.join(method.name());
    std::fs::create_dir_all(&method_dir)?;

    let one = |&seed: &u64| -> std::result::Result<SeedRecord, SeedFailure> {
        let dir = method_dir.join(format!("seed-{seed}"));
        run_seed(cfg, method, seed, &dir).map_err(|e| {
            let failure = SeedFailure {
                seed,
                error: e.to_string(),
            };
            // Best-effort structured record; the summary still captures it
            // even if the directory itself is unwritable.
            if std::fs::create_dir_all(&dir).is_ok() {
                if let Ok(text) = serde_json::to_string_pretty(&failure) {
                    let _ = std::fs::write(dir.join("error.json"), text);
                }
            }
            failure
        })
    };
    let results: Vec<std::result::Result<SeedRecord, SeedFailure>> = if parallel {
        seeds.par_iter().map(one).collect()
    } else {
        seeds.iter().map(one).collect()
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let n = records.len().max(1) as f64;
    let summary = ExperimentSummary {
        method: method.name().to_string(),
        seeds,
        mean_a_avg: records.iter().map(|r| r.a_avg).sum::<f64>() / n,
        mean_a_last: records.iter().map(|r| r.a_last).sum::<f64>() / n,
        records,
        failures,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(method_dir.join("summary.json"), text)?;
    Ok(summary)
}
