//! Accuracy-matrix bookkeeping and continual-learning metrics.
//!
//! Every metric is a pure function of the lower-triangular accuracy matrix
//! `R[t][j]` (accuracy on task j's test set after finishing task t), the
//! per-task test sizes, and, for forward transfer, a pre-training row plus a
//! fresh-initialization baseline row recorded by the harness.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    test_sizes: Vec<usize>,
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix {
            rows: Vec::new(),
            test_sizes: Vec::new(),
        }
    }

    /// Records the evaluation row after finishing task t. The row holds one
    /// accuracy per task seen so far (length t+1) and the new task's test size.
    pub fn push_row(&mut self, accuracies: Vec<f64>, new_task_test_size: usize) -> Result<()> {
        let t = self.rows.len();
        if accuracies.len() != t + 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} accuracies for task {}", t + 1, t),
                got: format!("{}", accuracies.len()),
            });
        }
        if let Some(a) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument {
                field: "accuracies".into(),
                reason: format!("{a} outside [0,1]"),
            });
        }
        if new_task_test_size == 0 {
            return Err(Error::InvalidArgument {
                field: "new_task_test_size".into(),
                reason: "test set is empty".into(),
            });
        }
        self.rows.push(accuracies);
        self.test_sizes.push(new_task_test_size);
        Ok(())
    }

    /// Number of completed tasks (T).
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn entry(&self, t: usize, j: usize) -> f64 {
        assert!(j <= t, "above-diagonal entry ({t},{j}) is undefined");
        self.rows[t][j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn test_sizes(&self) -> &[usize] {
        &self.test_sizes
    }

    /// Sample-weighted accuracy over all test sets seen by time t.
    pub fn overall_at(&self, t: usize) -> f64 {
        let total: usize = self.test_sizes[..=t].iter().sum();
        let hits: f64 = (0..=t)
            .map(|j| self.rows[t][j] * self.test_sizes[j] as f64)
            .sum();
        hits / total as f64
    }

    /// Task-unweighted mean accuracy at time t.
    pub fn unweighted_at(&self, t: usize) -> f64 {
        let row = &self.rows[t];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let t_total = self.tasks();
        let header: Vec<String> = (0..t_total).map(|j| format!("task_{j}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = (0..t_total)
                .map(|j| row.get(j).map(|a| format!("{a:.6}")).unwrap_or_default())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn require_tasks(&self, needed: usize) -> Result<()> {
        if self.tasks() < needed {
            return Err(Error::InvalidArgument {
                field: "accuracy_matrix".into(),
                reason: format!("needs at least {needed} completed tasks, have {}", self.tasks()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub a_avg: f64,
    pub a_last: f64,
    pub a_incre_avg: f64,
    pub a_incre_last: f64,
    pub aa_avg: f64,
    pub aa_last: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub remembering: f64,
    pub forgetting: f64,
}

/// (A_avg, A_last): mean-over-time and final sample-weighted accuracies.
pub fn accuracy_pair(m: &AccuracyMatrix) -> Result<(f64, f64)> {
    m.require_tasks(1)?;
    let t_total = m.tasks();
    let a_last = m.overall_at(t_total - 1);
    let a_avg = (0..t_total).map(|t| m.overall_at(t)).sum::<f64>() / t_total as f64;
    Ok((a_avg, a_last))
}

/// (A_incre_avg, A_incre_last): the incremental accuracy at time t is the
/// running mean of the time-t' overall accuracies for t' ≤ t.
pub fn incremental_accuracy(m: &AccuracyMatrix) -> Result<(f64, f64)> {
    m.require_tasks(1)?;
    let t_total = m.tasks();
    let mut running = 0.0;
    let mut incre = Vec::with_capacity(t_total);
    for t in 0..t_total {
        running += m.overall_at(t);
        incre.push(running / (t + 1) as f64);
    }
    let last = *incre.last().expect("at least one task");
    let avg = incre.iter().sum::<f64>() / t_total as f64;
    Ok((avg, last))
}

/// (Aa_avg, Aa_last): task-unweighted counterparts of `accuracy_pair`.
pub fn accuracy_a(m: &AccuracyMatrix) -> Result<(f64, f64)> {
    m.require_tasks(1)?;
    let t_total = m.tasks();
    let aa_last = m.unweighted_at(t_total - 1);
    let aa_avg = (0..t_total).map(|t| m.unweighted_at(t)).sum::<f64>() / t_total as f64;
    Ok((aa_avg, aa_last))
}

/// Backward transfer: mean over earlier tasks of (final accuracy − accuracy
/// right after that task was learned).
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    m.require_tasks(2)?;
    let t_total = m.tasks();
    let last = &m.rows[t_total - 1];
    let sum: f64 = (0..t_total - 1).map(|i| last[i] - m.rows[i][i]).sum();
    Ok(sum / (t_total - 1) as f64)
}

/// Forward transfer: mean over tasks i ≥ 1 of (accuracy on task i before
/// training it − fresh-initialization baseline b_i). Index 0 of both rows is
/// ignored; rows must cover all T tasks.
pub fn fwt(m: &AccuracyMatrix, pre_training: &[f64], baseline: &[f64]) -> Result<f64> {
    m.require_tasks(2)?;
    let t_total = m.tasks();
    if pre_training.len() != t_total || baseline.len() != t_total {
        return Err(Error::ShapeMismatch {
            expected: format!("pre-training and baseline rows of length {t_total}"),
            got: format!("{} and {}", pre_training.len(), baseline.len()),
        });
    }
    let sum: f64 = (1..t_total).map(|i| pre_training[i] - baseline[i]).sum();
    Ok(sum / (t_total - 1) as f64)
}

/// Remembering = 1 − |min(BwT, 0)|, clamped to [0,1].
pub fn remembering(bwt_value: f64) -> f64 {
    (1.0 - bwt_value.min(0.0).abs()).clamp(0.0, 1.0)
}

/// Forgetting: mean over earlier tasks of (best accuracy ever achieved on the
/// task − final accuracy on it).
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    m.require_tasks(2)?;
    let t_total = m.tasks();
    let last = &m.rows[t_total - 1];
    let sum: f64 = (0..t_total - 1)
        .map(|j| {
            let best = (j..t_total)
                .map(|l| m.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(sum / (t_total - 1) as f64)
}

/// Bundles all seven metrics; requires T ≥ 2 for the transfer metrics.
pub fn compute_report(
    m: &AccuracyMatrix,
    pre_training: &[f64],
    baseline: &[f64],
) -> Result<MetricReport> {
    let (a_avg, a_last) = accuracy_pair(m)?;
    let (a_incre_avg, a_incre_last) = incremental_accuracy(m)?;
    let (aa_avg, aa_last) = accuracy_a(m)?;
    let bwt_value = bwt(m)?;
    Ok(MetricReport {
        a_avg,
        a_last,
        a_incre_avg,
        a_incre_last,
        aa_avg,
        aa_last,
        bwt: bwt_value,
        fwt: fwt(m, pre_training, baseline)?,
        remembering: remembering(bwt_value),
        forgetting: forgetting(m)?,
    })
}
