//! End-to-end runs: simulate, censor, filter, reverse, condition.

use backfill_core::censor::{apply_censoring, BenchmarkSeries, CensorSpec, CensoredSeries, Tick};
use backfill_core::conditioning::{
    interpolation_relaxation, simulate_conditioned_backfill, AnchorSet, BridgeSpec,
};
use backfill_core::filter::{calibrate_linear_model, run_kalman_bucy, FilterTrajectory, GaussianState};
use backfill_core::reversal::{build_reversed_model, simulate_backfill, BackfillStart, ReversedModel};
use backfill_core::sde::{
    derive_seed, path_rng, simulate_linear_signal, LinearModelSpec, MatrixFunction, PathEnsemble,
    PathSample, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::baselines::{flat_fill, linear_fill, polynomial_fill};
use crate::config::{Method, RunConfig};
use crate::error::{CliError, Result};

const TAG_START: u64 = 1;
const TAG_SIGNAL: u64 = 2;
const TAG_TICKS: u64 = 3;
const TAG_BENCHMARKS: u64 = 4;
const TAG_BACKFILL: u64 = 5;

/// Simulated truth and what the observer gets to see of it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: PathSample,
    pub censored: CensoredSeries,
    pub benchmarks: Option<BenchmarkSeries>,
}

/// Scalar OU `dX = (a X + offset) dt + c dW` seen through `dY = X dt + kappa dB`.
fn ou_model(a: f64, c: f64, offset: f64, kappa: f64) -> Result<LinearModelSpec> {
    Ok(LinearModelSpec::new(
        MatrixFunction::scalar(a),
        MatrixFunction::scalar(c),
        MatrixFunction::scalar(offset),
        MatrixFunction::scalar(1.0),
        MatrixFunction::scalar(kappa),
    )?
    .with_control(MatrixFunction::scalar(1.0))?)
}

pub fn simulate_scenario(cfg: &RunConfig) -> Result<Scenario> {
    cfg.validate()?;
    let grid = TimeGrid::uniform(0.0, cfg.observer_time, cfg.n_steps)?;
    let model = ou_model(cfg.a, cfg.c, -cfg.a * cfg.mean_level, cfg.kappa)?;
    let mut rng = path_rng(derive_seed(cfg.seed, TAG_START), 0);
    let z: f64 = rng.sample(StandardNormal);
    let x0 = if cfg.a < 0.0 {
        cfg.mean_level + cfg.c / (-2.0 * cfg.a).sqrt() * z
    } else {
        cfg.mean_level
    };
    let truth = simulate_linear_signal(
        &model,
        &DVector::from_element(1, x0),
        &grid,
        derive_seed(cfg.seed, TAG_SIGNAL),
    )?;
    let spec = CensorSpec::new(cfg.intensity, cfg.liquidity_time, cfg.observer_time)?;
    let censored = apply_censoring(&truth, &spec, derive_seed(cfg.seed, TAG_TICKS))?;
    let benchmarks = if cfg.benchmarks > 0 {
        let mut rng = path_rng(derive_seed(cfg.seed, TAG_BENCHMARKS), 0);
        let values = truth
            .values
            .iter()
            .map(|x| {
                DVector::from_fn(cfg.benchmarks, |_, _| {
                    let e: f64 = rng.sample(StandardNormal);
                    x[0] + cfg.benchmark_noise * e
                })
            })
            .collect();
        Some(BenchmarkSeries::new(PathSample::new(grid, values)?)?)
    } else {
        None
    };
    Ok(Scenario {
        truth,
        censored,
        benchmarks,
    })
}

/// What the backfill sees: ticks, the dense window, optional benchmarks on
/// the full horizon.
#[derive(Debug, Clone)]
pub struct BackfillInputs {
    pub ticks: Vec<(f64, f64)>,
    pub dense: PathSample,
    pub benchmarks: Option<PathSample>,
}

impl BackfillInputs {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            ticks: s.censored.ticks.iter().map(|t| (t.time, t.value[0])).collect(),
            dense: s.censored.dense.clone(),
            benchmarks: s.benchmarks.as_ref().map(|b| b.path().clone()),
        }
    }

    /// Check consistency and rebuild the grid `[0, T0]` from the dense window.
    pub fn validate(&self) -> Result<TimeGrid> {
        if self.dense.dim() != 1 {
            return Err(CliError::Invalid("dense window must be a single series".into()));
        }
        let dense_grid = self.dense.grid;
        let dt = dense_grid.dt();
        let t0 = dense_grid.t_end();
        let n = (t0 / dt).round() as usize;
        let grid = TimeGrid::uniform(0.0, t0, n)?;
        let aligned = grid
            .index_of(dense_grid.t_start())
            .is_some_and(|first| grid.subgrid(first, n).is_ok_and(|g| g.aligned_with(&dense_grid)));
        if !aligned {
            return Err(CliError::Invalid(
                "dense window is not aligned with a uniform grid starting at 0".into(),
            ));
        }
        let ticks = self
            .ticks
            .iter()
            .map(|(t, v)| Tick {
                time: *t,
                value: DVector::from_element(1, *v),
            })
            .collect();
        CensoredSeries::new(ticks, self.dense.clone())?;
        if let Some(b) = &self.benchmarks {
            if b.grid != grid {
                return Err(CliError::Invalid(
                    "benchmarks must cover the full grid [0, T0]".into(),
                ));
            }
            BenchmarkSeries::new(b.clone())?;
        }
        Ok(grid)
    }

    pub fn liquidity_time(&self) -> f64 {
        self.dense.grid.t_start()
    }

    pub fn benchmark_count(&self) -> usize {
        self.benchmarks.as_ref().map_or(0, |b| b.dim())
    }
}

/// Signal dynamics used for filtering and reversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalFit {
    pub a: f64,
    pub c: f64,
    pub offset: f64,
}

impl SignalFit {
    pub fn from_config(cfg: &RunConfig, inputs: &BackfillInputs) -> Result<Self> {
        if cfg.calibrate {
            let cal = calibrate_linear_model(&inputs.dense, cfg.kappa)?;
            Ok(Self {
                a: cal.a,
                c: cal.c,
                offset: cal.intercept,
            })
        } else {
            Ok(Self {
                a: cfg.a,
                c: cfg.c,
                offset: -cfg.a * cfg.mean_level,
            })
        }
    }

    /// Stationary law when mean reverting, otherwise a wide law around `x`.
    pub fn prior(&self, x: f64, horizon: f64) -> Result<GaussianState> {
        let state = if self.a < 0.0 {
            GaussianState::scalar(-self.offset / self.a, self.c * self.c / (-2.0 * self.a))
        } else {
            GaussianState::scalar(x, self.c * self.c * horizon.max(1.0))
        };
        Ok(state?)
    }

    /// Filter model with the asset channel (`kappa`) and one channel per
    /// benchmark (`s sqrt(dt)`, so that `beta dt` has the right noise).
    pub fn filter_model(&self, cfg: &RunConfig, benchmarks: usize, dt: f64) -> Result<LinearModelSpec> {
        let p = 1 + benchmarks;
        let mut k = DMatrix::from_diagonal_element(p, p, cfg.benchmark_noise * dt.sqrt());
        k[(0, 0)] = cfg.kappa;
        Ok(LinearModelSpec::new(
            MatrixFunction::scalar(self.a),
            MatrixFunction::scalar(self.c),
            MatrixFunction::scalar(self.offset),
            MatrixFunction::constant(DMatrix::from_element(p, 1, 1.0)),
            MatrixFunction::constant(k),
        )?
        .with_control(MatrixFunction::scalar(1.0))?)
    }
}

/// Cumulative observation path `Y` over the dense window: each channel
/// integrates its series with left-point sums.
fn observation_path(inputs: &BackfillInputs, grid: &TimeGrid) -> Result<PathSample> {
    let dense = &inputs.dense;
    let first = grid.index_of(dense.grid.t_start()).expect("validated alignment");
    let p = 1 + inputs.benchmark_count();
    let dt = grid.dt();
    let mut y = DVector::zeros(p);
    let mut values = Vec::with_capacity(dense.values.len());
    values.push(y.clone());
    for i in 0..dense.values.len() - 1 {
        y[0] += dense.values[i][0] * dt;
        if let Some(b) = &inputs.benchmarks {
            for j in 0..p - 1 {
                y[j + 1] += b.values[first + i][j] * dt;
            }
        }
        values.push(y.clone());
    }
    Ok(PathSample::new(dense.grid, values)?)
}

/// Kalman–Bucy filter over the dense window.
pub fn run_filter(cfg: &RunConfig, inputs: &BackfillInputs) -> Result<FilterTrajectory> {
    let grid = inputs.validate()?;
    let fit = SignalFit::from_config(cfg, inputs)?;
    let model = fit.filter_model(cfg, inputs.benchmark_count(), grid.dt())?;
    let y = observation_path(inputs, &grid)?;
    let init = fit.prior(inputs.dense.values[0][0], grid.t_end())?;
    Ok(run_kalman_bucy(&model, &y, &init)?.0)
}

/// Per-time ensemble summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSummary {
    pub times: Vec<f64>,
    /// mean, median, q05, q25, q75, q95.
    pub rows: Vec<[f64; 6]>,
}

pub const BAND_COLUMNS: [&str; 7] = ["time", "mean", "median", "q05", "q25", "q75", "q95"];

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(times: &[f64], samples: impl Fn(usize) -> Vec<f64>) -> BandSummary {
    let rows = (0..times.len())
        .map(|i| {
            let mut xs = samples(i);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.sort_by(f64::total_cmp);
            let q = |p| quantile_sorted(&xs, p);
            [mean, q(0.5), q(0.05), q(0.25), q(0.75), q(0.95)]
        })
        .collect();
    BandSummary {
        times: times.to_vec(),
        rows,
    }
}

fn deterministic_summary(times: &[f64], values: &[f64]) -> BandSummary {
    BandSummary {
        times: times.to_vec(),
        rows: values.iter().map(|v| [*v; 6]).collect(),
    }
}

/// Diagnostics of the anchor handling of a conditioned method.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorReport {
    pub anchors: Vec<(f64, f64)>,
    pub eps_hit: f64,
    pub max_hit_error: f64,
    pub max_pin_jump: f64,
    pub accepted: usize,
    pub n_paths: usize,
    pub mean_kl: Option<f64>,
}

impl AnchorReport {
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("anchors".to_string(), self.anchors.len().to_string()),
            ("eps_hit".to_string(), self.eps_hit.to_string()),
            ("max_hit_error".to_string(), self.max_hit_error.to_string()),
            ("max_pin_jump".to_string(), self.max_pin_jump.to_string()),
            ("accepted_paths".to_string(), self.accepted.to_string()),
            ("n_paths".to_string(), self.n_paths.to_string()),
        ];
        if let Some(kl) = self.mean_kl {
            out.push(("mean_kl".to_string(), kl.to_string()));
        }
        for (i, (t, v)) in self.anchors.iter().enumerate() {
            out.push((format!("anchor.{i}"), format!("{t},{v}")));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BackfillOutput {
    pub method: Method,
    pub summary: BandSummary,
    /// Raw paths on the censored window, one inner vector per path.
    pub paths: Option<Vec<Vec<f64>>>,
    pub anchors: Option<AnchorReport>,
}

/// Ticks moved onto the grid time at or before them, with one anchor per
/// grid time (ticks in one cell share the cell's value), followed by the
/// dense start `(T, eta_T)`.
fn grid_anchors(inputs: &BackfillInputs, grid: &TimeGrid) -> Vec<(usize, f64)> {
    let first_dense = grid.index_of(inputs.liquidity_time()).expect("validated alignment");
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (t, v) in &inputs.ticks {
        let i = grid.index_at_or_before(*t).unwrap_or(0).min(first_dense);
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 = *v,
            _ => out.push((i, *v)),
        }
    }
    out.retain(|a| a.0 < first_dense);
    out.push((first_dense, inputs.dense.values[0][0]));
    out
}

fn anchor_set(grid: &TimeGrid, anchors: &[(usize, f64)]) -> Result<AnchorSet> {
    let pts: Vec<(f64, f64)> = anchors.iter().map(|(i, v)| (grid.time(*i), *v)).collect();
    Ok(AnchorSet::from_scalars(&pts)?)
}

/// Reversed filter dynamics over `[0, T0]` and the start `X_hat(T0)`.
pub fn reversed_filter(cfg: &RunConfig, inputs: &BackfillInputs) -> Result<(ReversedModel, DVector<f64>)> {
    let grid = inputs.validate()?;
    let fit = SignalFit::from_config(cfg, inputs)?;
    let model = fit.filter_model(cfg, inputs.benchmark_count(), grid.dt())?;
    let filter = run_filter(cfg, inputs)?;
    let prior = fit.prior(inputs.dense.values[0][0], grid.t_end())?;
    let predicted = FilterTrajectory::predicted(&model, &prior, &grid)?;
    let reversed = build_reversed_model(&model, &predicted, cfg.law_cov_source)?;
    Ok((reversed, filter.last().mean.clone()))
}

pub fn run_backfill(cfg: &RunConfig, inputs: &BackfillInputs) -> Result<BackfillOutput> {
    let grid = inputs.validate()?;
    let first_dense = grid.index_of(inputs.liquidity_time()).expect("validated alignment");
    let times: Vec<f64> = (0..first_dense).map(|i| grid.time(i)).collect();
    let anchors = grid_anchors(inputs, &grid);
    let seed = derive_seed(cfg.seed, TAG_BACKFILL);
    let method = cfg.method;
    let deterministic = |values: Vec<f64>| BackfillOutput {
        method,
        summary: deterministic_summary(&times, &values),
        paths: None,
        anchors: None,
    };
    let eta_t = inputs.dense.values[0][0];
    let tick_points: Vec<(f64, f64)> = anchors.iter().map(|(i, v)| (grid.time(*i), *v)).collect();
    let mut baseline_points = inputs.ticks.clone();
    baseline_points.push((inputs.liquidity_time(), eta_t));

    match method {
        Method::Flat => Ok(deterministic(flat_fill(&inputs.ticks, eta_t, &times))),
        Method::Linear => Ok(deterministic(linear_fill(&baseline_points, &times))),
        Method::Polynomial => Ok(deterministic(polynomial_fill(
            &baseline_points,
            cfg.poly_degree,
            &times,
        )?)),
        Method::Optimal | Method::InterpRelaxed => {
            let (reversed, start) = reversed_filter(cfg, inputs)?;
            let ensemble =
                simulate_backfill(&reversed, &BackfillStart::Point(start), 0.0, cfg.n_paths, seed)?;
            if method == Method::Optimal {
                return Ok(ensemble_output(method, &times, &ensemble, cfg.write_paths, None));
            }
            let mut relax_points = anchors.clone();
            let last = grid.n_steps();
            relax_points.push((last, inputs.dense.values.last().unwrap()[0]));
            let set = anchor_set(&grid, &relax_points)?;
            let relaxed = ensemble
                .paths()
                .iter()
                .map(|p| interpolation_relaxation(p, &set))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let max_hit_error = relaxed
                .iter()
                .flat_map(|p| relax_points.iter().map(move |(i, v)| (p.values[*i][0] - v).abs()))
                .fold(0.0, f64::max);
            let report = AnchorReport {
                anchors: relax_points.iter().map(|(i, v)| (grid.time(*i), *v)).collect(),
                eps_hit: cfg.eps_hit,
                max_hit_error,
                max_pin_jump: 0.0,
                accepted: relaxed.len(),
                n_paths: relaxed.len(),
                mean_kl: None,
            };
            let ensemble = PathEnsemble::from_paths(&relaxed)?;
            Ok(ensemble_output(method, &times, &ensemble, cfg.write_paths, Some(report)))
        }
        Method::OptimalConditioned => {
            let (reversed, start) = reversed_filter(cfg, inputs)?;
            let set = anchor_set(&grid, &anchors)?;
            let spec = BridgeSpec::new(reversed, set, 0.0, cfg.eps_hit)?;
            let ens = simulate_conditioned_backfill(&spec, &BackfillStart::Point(start), cfg.n_paths, seed)?;
            let report = AnchorReport {
                anchors: tick_points,
                eps_hit: cfg.eps_hit,
                max_hit_error: ens.max_hit_error(),
                max_pin_jump: ens.pin_jumps.iter().flatten().copied().fold(0.0, f64::max),
                accepted: ens.accepted_count(),
                n_paths: cfg.n_paths,
                mean_kl: Some(ens.mean_kl()),
            };
            Ok(ensemble_output(method, &times, &ens.paths, cfg.write_paths, Some(report)))
        }
    }
}

fn ensemble_output(
    method: Method,
    times: &[f64],
    ensemble: &PathEnsemble,
    keep_paths: bool,
    anchors: Option<AnchorReport>,
) -> BackfillOutput {
    let summary = summarize(times, |i| ensemble.cross_section(i, 0));
    let paths = keep_paths.then(|| {
        (0..ensemble.n_paths())
            .map(|k| (0..times.len()).map(|i| ensemble.value(k, i)[0]).collect())
            .collect()
    });
    BackfillOutput {
        method,
        summary,
        paths,
        anchors,
    }
}
