//! Subcommands: each reads its inputs from files and writes its outputs to
//! the configured output directory.

use std::path::{Path, PathBuf};

use backfill_core::sde::{PathSample, TimeGrid};
use nalgebra::DVector;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::evaluate::{evaluate_dir, EvaluationReport};
use crate::io::{write_report, write_table, Table};
use crate::pipeline::{run_backfill, run_filter, simulate_scenario, BackfillInputs, BAND_COLUMNS};

fn headers(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn path_rows(path: &PathSample) -> impl Iterator<Item = Vec<f64>> + '_ {
    path.grid.times().zip(&path.values).map(|(t, v)| {
        let mut row = vec![t];
        row.extend(v.iter());
        row
    })
}

/// Writes `truth.csv`, `ticks.csv`, `dense.csv` and, with benchmarks,
/// `benchmarks.csv`. Returns the written paths.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let s = simulate_scenario(cfg)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let value = headers(&["time", "value"]);
    let mut written = Vec::new();

    let p = dir.join("truth.csv");
    write_table(&p, &value, path_rows(&s.truth))?;
    written.push(p);

    let p = dir.join("ticks.csv");
    write_table(
        &p,
        &value,
        s.censored.ticks.iter().map(|t| vec![t.time, t.value[0]]),
    )?;
    written.push(p);

    let p = dir.join("dense.csv");
    write_table(&p, &value, path_rows(&s.censored.dense))?;
    written.push(p);

    if let Some(b) = &s.benchmarks {
        let p = dir.join("benchmarks.csv");
        let mut h = vec!["time".to_string()];
        h.extend((1..=b.count()).map(|j| format!("benchmark{j}")));
        write_table(&p, &h, path_rows(b.path()))?;
        written.push(p);
    }
    Ok(written)
}

/// Rebuild a path from a table whose times form a uniform grid.
fn table_path(table: &Table) -> Result<PathSample> {
    let times = table.times();
    if times.len() < 2 {
        return Err(CliError::Parse {
            path: table.path.clone(),
            line: 1,
            message: "need at least two rows".into(),
        });
    }
    let n = times.len() - 1;
    let grid = TimeGrid::uniform(times[0], times[n], n)?;
    let tol = 1e-9 * grid.dt();
    if let Some(i) = times
        .iter()
        .enumerate()
        .position(|(i, t)| (t - grid.time(i)).abs() > tol)
    {
        return Err(CliError::Parse {
            path: table.path.clone(),
            line: i as u64 + 2,
            message: "times are not evenly spaced".into(),
        });
    }
    let values = table
        .rows
        .iter()
        .map(|r| DVector::from_column_slice(&r[1..]))
        .collect();
    Ok(PathSample::new(grid, values)?)
}

/// Read `ticks.csv`, `dense.csv` and the optional `benchmarks.csv`.
pub fn load_inputs(dir: &Path) -> Result<BackfillInputs> {
    let ticks = Table::read(&dir.join("ticks.csv"))?;
    let values = ticks.column("value")?;
    let dense = table_path(&Table::read(&dir.join("dense.csv"))?)?;
    let bench_path = dir.join("benchmarks.csv");
    let benchmarks = if bench_path.exists() {
        Some(table_path(&Table::read(&bench_path)?)?)
    } else {
        None
    };
    let inputs = BackfillInputs {
        ticks: ticks.times().into_iter().zip(values).collect(),
        dense,
        benchmarks,
    };
    inputs.validate()?;
    Ok(inputs)
}

/// Writes `filter.csv` with the filter mean and variance on the dense window.
pub fn cmd_filter(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = load_inputs(cfg.input_dir())?;
    let filter = run_filter(cfg, &inputs)?;
    ensure_dir(&cfg.out_dir)?;
    let p = cfg.out_dir.join("filter.csv");
    write_table(
        &p,
        &headers(&["time", "mean", "variance"]),
        filter
            .grid
            .times()
            .zip(&filter.states)
            .map(|(t, s)| vec![t, s.mean[0], s.cov[(0, 0)]]),
    )?;
    Ok(p)
}

/// Writes `backfill_<method>.csv`, plus `paths_<method>.csv` when requested
/// and `anchors_<method>.txt` for conditioned methods.
pub fn cmd_backfill(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate_run()?;
    let inputs = load_inputs(cfg.input_dir())?;
    let out = run_backfill(cfg, &inputs)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let m = out.method.name();
    let mut written = Vec::new();

    let p = dir.join(format!("backfill_{m}.csv"));
    write_table(
        &p,
        &headers(&BAND_COLUMNS),
        out.summary.times.iter().zip(&out.summary.rows).map(|(t, r)| {
            let mut row = vec![*t];
            row.extend(r);
            row
        }),
    )?;
    written.push(p);

    if let Some(paths) = &out.paths {
        let p = dir.join(format!("paths_{m}.csv"));
        let mut h = vec!["time".to_string()];
        h.extend((0..paths.len()).map(|k| format!("path{k}")));
        write_table(
            &p,
            &h,
            out.summary.times.iter().enumerate().map(|(i, t)| {
                let mut row = vec![*t];
                row.extend(paths.iter().map(|path| path[i]));
                row
            }),
        )?;
        written.push(p);
    }

    if let Some(report) = &out.anchors {
        let p = dir.join(format!("anchors_{m}.txt"));
        write_report(&p, &report.entries())?;
        written.push(p);
    }
    Ok(written)
}

/// Scores every backfill in the input directory against its `truth.csv` and
/// writes `evaluation.txt`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    let report = evaluate_dir(cfg.input_dir())?;
    ensure_dir(&cfg.out_dir)?;
    write_report(&cfg.out_dir.join("evaluation.txt"), &report.entries())?;
    Ok(report)
}
