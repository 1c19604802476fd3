//! Poisson tick sampling and the censoring map.
//!
//! Before the liquidity time `T` the asset is seen only at the jump times of
//! a homogeneous Poisson process; from `T` to the observer time `T0` the path
//! is observed densely. The realized record keeps the individual ticks
//! `(T_i, eta(T_i-))` rather than their running sum.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::Exp;

use crate::error::{invalid, Result};
use crate::sde::{path_rng, PathSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensorSpec {
    intensity: f64,
    liquidity_time: f64,
    observer_time: f64,
}

impl CensorSpec {
    pub fn new(intensity: f64, liquidity_time: f64, observer_time: f64) -> Result<Self> {
        if !(intensity >= 0.0 && intensity.is_finite()) {
            return Err(invalid(format!("tick intensity must be >= 0, got {intensity}")));
        }
        if !(liquidity_time >= 0.0) {
            return Err(invalid(format!(
                "liquidity time must be >= 0, got {liquidity_time}"
            )));
        }
        if !(observer_time > liquidity_time && observer_time.is_finite()) {
            return Err(invalid(format!(
                "observer time {observer_time} must exceed liquidity time {liquidity_time}"
            )));
        }
        Ok(Self {
            intensity,
            liquidity_time,
            observer_time,
        })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn liquidity_time(&self) -> f64 {
        self.liquidity_time
    }

    pub fn observer_time(&self) -> f64 {
        self.observer_time
    }
}

/// One realized historical observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub time: f64,
    pub value: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSeries {
    pub ticks: Vec<Tick>,
    pub dense: PathSample,
}

impl CensoredSeries {
    pub fn new(ticks: Vec<Tick>, dense: PathSample) -> Result<Self> {
        let start = dense.grid.t_start();
        for w in ticks.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(invalid("tick times must be strictly increasing"));
            }
        }
        if let Some(bad) = ticks.iter().find(|t| !(t.time < start)) {
            return Err(invalid(format!(
                "tick at t={} is not before the dense segment start {start}",
                bad.time
            )));
        }
        if ticks.iter().any(|t| t.value.len() != dense.dim()) {
            return Err(invalid("tick dimension differs from the dense series"));
        }
        Ok(Self { ticks, dense })
    }

    pub fn liquidity_time(&self) -> f64 {
        self.dense.grid.t_start()
    }
}

/// Benchmark series observed without gaps on the full horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSeries(PathSample);

impl BenchmarkSeries {
    pub fn new(path: PathSample) -> Result<Self> {
        if path.values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(invalid("benchmark series has missing or non-finite values"));
        }
        Ok(Self(path))
    }

    pub fn path(&self) -> &PathSample {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.dim()
    }
}

/// Jump times of a homogeneous Poisson process on `[0, T)`, ascending.
pub fn sample_poisson_times(spec: &CensorSpec, seed: u64) -> Vec<f64> {
    let mut times = Vec::new();
    if spec.intensity == 0.0 || spec.liquidity_time == 0.0 {
        return times;
    }
    let exp = Exp::new(spec.intensity).expect("intensity checked positive");
    let mut rng = path_rng(seed, 0);
    let mut t = 0.0;
    loop {
        t += rng.sample(exp);
        if t >= spec.liquidity_time {
            return times;
        }
        times.push(t);
    }
}

/// Censor a true path: ticks at Poisson times before `T`, dense values on
/// `[T, T0]`.
///
/// The tick value at `T_i` is the path value at the greatest grid time
/// `<= T_i`. `T` and `T0` must be grid points of `eta`.
pub fn apply_censoring(eta: &PathSample, spec: &CensorSpec, seed: u64) -> Result<CensoredSeries> {
    let grid = &eta.grid;
    let tol = 1e-9 * grid.dt();
    if grid.t_end() < spec.observer_time - tol {
        return Err(invalid(format!(
            "path ends at {} before the observer time {}",
            grid.t_end(),
            spec.observer_time
        )));
    }
    if grid.t_start() > spec.liquidity_time + tol {
        return Err(invalid(format!(
            "path starts at {} after the liquidity time {}",
            grid.t_start(),
            spec.liquidity_time
        )));
    }
    let first = grid.index_of(spec.liquidity_time).ok_or_else(|| {
        invalid(format!("liquidity time {} is not a grid point", spec.liquidity_time))
    })?;
    let last = grid.index_of(spec.observer_time).ok_or_else(|| {
        invalid(format!("observer time {} is not a grid point", spec.observer_time))
    })?;

    let times = sample_poisson_times(spec, seed);
    if let Some(&t) = times.first() {
        if t < grid.t_start() - tol {
            return Err(invalid(format!(
                "tick at t={t} precedes the path start {}",
                grid.t_start()
            )));
        }
    }
    let ticks = times
        .into_iter()
        .map(|t| Tick {
            time: t,
            value: eta.value_at_or_before(t).expect("checked coverage").clone(),
        })
        .collect();
    CensoredSeries::new(ticks, eta.slice(first, last)?)
}
