//! Cumulative component ablation ladder.
//!
//! Rungs toggle, in order: A = adjustable memory quota, G = gradient
//! matching, F = relationship matching, C = shared-VAE compensation
//! infrastructure, K = the contrastive term. The replay baseline anchors
//! the table; deltas are against its mean scores over the same seeds.

use crate::config::ExperimentConfig;
use crate::plots;
use fcil_core::client::{Method, StrategyConfig};
use fcil_core::runtime::Simulation;
use fcil_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub a_avg: f64,
    pub a_last: f64,
    pub delta_avg: f64,
    pub delta_last: f64,
}

/// The ladder as (label, strategy) pairs, replay first.
pub fn ladder(base: &StrategyConfig) -> Vec<(String, StrategyConfig)> {
    let mut replay = base.clone();
    replay.method = Method::Replay;
    replay.use_vae = false;
    replay.adjustable_memory = true;

    let mut rung_a = base.clone();
    rung_a.method = Method::Ecoral;
    rung_a.adjustable_memory = true;
    rung_a.use_vae = false;
    rung_a.condense.grad_match = false;
    rung_a.condense.relationship = false;
    rung_a.condense.beta = 0.0;

    let mut rung_ag = rung_a.clone();
    rung_ag.condense.grad_match = true;

    let mut rung_agf = rung_ag.clone();
    rung_agf.condense.relationship = true;

    let mut rung_agfc = rung_agf.clone();
    rung_agfc.use_vae = true;

    let mut rung_agfck = rung_agfc.clone();
    rung_agfck.condense.beta = base.condense.beta;

    vec![
        ("replay".into(), replay),
        ("A".into(), rung_a),
        ("A+G".into(), rung_ag),
        ("A+G+F".into(), rung_agf),
        ("A+G+F+C".into(), rung_agfc),
        ("A+G+F+C+K".into(), rung_agfck),
    ]
}

/// One (rung, seed) cell: mean metrics plus the per-stage accuracy curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Cell {
    a_avg: f64,
    a_last: f64,
    curve: Vec<f64>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    strategy: &StrategyConfig,
    seed: u64,
    dir: &Path,
) -> Result<Cell> {
    let mut sim_cfg = cfg.simulation(strategy.method, seed)?;
    sim_cfg.strategy = strategy.clone();
    let (train, test) = cfg.load_data(seed)?;
    let mut sim = Simulation::new(sim_cfg, train, test)?;
    let out = sim.run_all()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("matrix.csv"), out.matrix.to_csv())?;
    let mut metrics = serde_json::to_string_pretty(&out.report)?;
    metrics.push('\n');
    std::fs::write(dir.join("metrics.json"), metrics)?;
    let report = out
        .report
        .ok_or_else(|| Error::invalid("tasks", "metrics need at least two tasks"))?;
    Ok(Cell {
        a_avg: report.a_avg,
        a_last: report.a_last,
        curve: (0..out.matrix.tasks())
            .map(|t| out.matrix.overall_at(t))
            .collect(),
    })
}

/// Runs the full ladder over the configured seeds and writes the table,
/// per-run artifacts, and the combined accuracy-curve plot under
/// `<out>/ablation/`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    out_root: &Path,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let base = cfg.strategy(Method::Ecoral);
    let rungs = ladder(&base);
    let root = out_root.join("ablation");
    std::fs::create_dir_all(&root)?;

    let jobs: Vec<(usize, String, StrategyConfig, u64)> = rungs
        .iter()
        .enumerate()
        .flat_map(|(i, (label, strategy))| {
            cfg.seeds
                .iter()
                .map(move |&s| (i, label.clone(), strategy.clone(), s))
        })
        .collect();
    let run_one = |(i, label, strategy, seed): &(usize, String, StrategyConfig, u64)| {
        let dir = root.join(label.replace('+', "")).join(format!("seed-{seed}"));
        run_cell(cfg, strategy, *seed, &dir).map(|c| (*i, c))
    };
    let cells: Vec<(usize, Cell)> = if parallel {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (i, (label, _)) in rungs.iter().enumerate() {
        let mine: Vec<&Cell> = cells.iter().filter(|(j, _)| *j == i).map(|(_, c)| c).collect();
        let n = mine.len() as f64;
        let a_avg = mine.iter().map(|c| c.a_avg).sum::<f64>() / n;
        let a_last = mine.iter().map(|c| c.a_last).sum::<f64>() / n;
        let stages = mine[0].curve.len();
        let curve: Vec<f64> = (0..stages)
            .map(|t| mine.iter().map(|c| c.curve[t]).sum::<f64>() / n)
            .collect();
        curves.push((label.clone(), curve));
        rows.push(AblationRow {
            label: label.clone(),
            a_avg,
            a_last,
            delta_avg: 0.0,
            delta_last: 0.0,
        });
    }
    let (base_avg, base_last) = (rows[0].a_avg, rows[0].a_last);
    for row in &mut rows {
        row.delta_avg = row.a_avg - base_avg;
        row.delta_last = row.a_last - base_last;
    }

    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    std::fs::write(root.join("ablation.json"), json)?;
    std::fs::write(root.join("ablation.md"), render_table(&rows))?;
    std::fs::write(
        root.join("curves.svg"),
        plots::accuracy_chart("overall accuracy by stage, per ladder rung", &curves),
    )?;
    Ok(rows)
}

/// Markdown table, accuracy in percent, replay deltas zero by definition.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut md = String::from(
        "| components | A_avg (%) | A_last (%) | dA_avg vs replay | dA_last vs replay |\n\
         |---|---|---|---|---|\n",
    );
    for r in rows {
        md.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:+.2} | {:+.2} |\n",
            r.label,
            100.0 * r.a_avg,
            100.0 * r.a_last,
            100.0 * r.delta_avg,
            100.0 * r.delta_last
        ));
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_toggles_accumulate_in_order() {
        let base = StrategyConfig::default();
        let rungs = ladder(&base);
        assert_eq!(rungs.len(), 6);
        assert_eq!(rungs[0].1.method, Method::Replay);
        let a = &rungs[1].1;
        assert!(a.adjustable_memory && !a.condense.grad_match && !a.use_vae);
        assert_eq!(a.condense.beta, 0.0);
        let ag = &rungs[2].1;
        assert!(ag.condense.grad_match && !ag.condense.relationship);
        let agf = &rungs[3].1;
        assert!(agf.condense.relationship && !agf.use_vae);
        let agfc = &rungs[4].1;
        assert!(agfc.use_vae);
        assert_eq!(agfc.condense.beta, 0.0);
        let agfck = &rungs[5].1;
        assert_eq!(agfck.condense.beta, base.condense.beta);
        assert!(agfck.condense.beta > 0.0);
    }

    #[test]
    fn replay_row_anchors_deltas_at_zero() {
        let rows = vec![
            AblationRow {
                label: "replay".into(),
                a_avg: 0.5,
                a_last: 0.4,
                delta_avg: 0.0,
                delta_last: 0.0,
            },
            AblationRow {
                label: "A".into(),
                a_avg: 0.6,
                a_last: 0.5,
                delta_avg: 0.1,
                delta_last: 0.1,
            },
        ];
        let md = render_table(&rows);
        assert!(md.contains("| replay | 50.00 | 40.00 | +0.00 | +0.00 |"));
        assert!(md.contains("| A | 60.00 | 50.00 | +10.00 | +10.00 |"));
    }
}
