//! Scoring of backfill outputs against the simulated truth.

use std::path::Path;

use crate::config::Method;
use crate::error::{CliError, Result};
use crate::io::{read_report, Table};

/// Scores of one method on the censored window.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub method: Method,
    pub points: usize,
    /// Root mean squared error of the `mean` column.
    pub rmse: f64,
    /// Fraction of truth values inside `[q25, q75]`.
    pub coverage50: f64,
    /// Fraction of truth values inside `[q05, q95]`.
    pub coverage90: f64,
    pub anchor_entries: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationReport {
    pub scores: Vec<MethodScore>,
}

impl EvaluationReport {
    pub fn get(&self, method: Method) -> Option<&MethodScore> {
        self.scores.iter().find(|s| s.method == method)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for s in &self.scores {
            let m = s.method.name();
            out.push((format!("{m}.points"), s.points.to_string()));
            out.push((format!("{m}.rmse"), s.rmse.to_string()));
            out.push((format!("{m}.coverage50"), s.coverage50.to_string()));
            out.push((format!("{m}.coverage90"), s.coverage90.to_string()));
            for (k, v) in &s.anchor_entries {
                if !k.starts_with("anchor.") {
                    out.push((format!("{m}.{k}"), v.clone()));
                }
            }
        }
        out
    }
}

fn same_time(a: f64, b: f64, dt: f64) -> bool {
    (a - b).abs() <= 1e-9 * dt.max(f64::MIN_POSITIVE)
}

/// Score one backfill table against the truth table.
///
/// Every backfill time must be a truth time at the same position; the truth
/// is the `value` column.
pub fn score_table(method: Method, truth: &Table, backfill: &Table) -> Result<MethodScore> {
    let t_times = truth.times();
    let b_times = backfill.times();
    let dt = if t_times.len() > 1 { t_times[1] - t_times[0] } else { 1.0 };
    if b_times.len() > t_times.len()
        || b_times.iter().zip(&t_times).any(|(a, b)| !same_time(*a, *b, dt))
    {
        return Err(CliError::Invalid(format!(
            "{} is not aligned with the truth grid in {}",
            backfill.path.display(),
            truth.path.display()
        )));
    }
    let x = truth.column("value")?;
    let mean = backfill.column("mean")?;
    let q05 = backfill.column("q05")?;
    let q25 = backfill.column("q25")?;
    let q75 = backfill.column("q75")?;
    let q95 = backfill.column("q95")?;
    let n = b_times.len();
    if n == 0 {
        return Err(CliError::Invalid(format!("{} has no rows", backfill.path.display())));
    }
    let mut sq = 0.0;
    let mut in50 = 0usize;
    let mut in90 = 0usize;
    for i in 0..n {
        sq += (mean[i] - x[i]).powi(2);
        in50 += usize::from(q25[i] <= x[i] && x[i] <= q75[i]);
        in90 += usize::from(q05[i] <= x[i] && x[i] <= q95[i]);
    }
    Ok(MethodScore {
        method,
        points: n,
        rmse: (sq / n as f64).sqrt(),
        coverage50: in50 as f64 / n as f64,
        coverage90: in90 as f64 / n as f64,
        anchor_entries: Vec::new(),
    })
}

/// Score every `backfill_<method>.csv` found in `dir` against `truth.csv`.
pub fn evaluate_dir(dir: &Path) -> Result<EvaluationReport> {
    let truth = Table::read(&dir.join("truth.csv"))?;
    let mut report = EvaluationReport::default();
    for method in Method::ALL {
        let path = dir.join(format!("backfill_{method}.csv"));
        if !path.exists() {
            continue;
        }
        let backfill = Table::read(&path)?;
        let mut score = score_table(method, &truth, &backfill)?;
        let anchors = dir.join(format!("anchors_{method}.txt"));
        if anchors.exists() {
            score.anchor_entries = read_report(&anchors)?;
        }
        report.scores.push(score);
    }
    if report.scores.is_empty() {
        return Err(CliError::Io {
            path: dir.join("backfill_<method>.csv"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no backfill outputs"),
        });
    }
    Ok(report)
}

