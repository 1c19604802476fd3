//! One-dimensional grid realization of the filtering density equation.
//!
//! The density lives on a fixed cell grid (values are cell averages at the
//! midpoints). One filter step is split in two halves:
//!
//! 1. transport by the Fokker–Planck operator
//!    `dp/dt = -d/dx (b p) + 1/2 d2/dx2 (sigma^2 p)` with an explicit
//!    conservative finite-volume scheme and zero-flux walls;
//! 2. multiplicative reweighting by the observation increment
//!    `1 + kappa^-2 (h - pi(h)) (dY - pi(h) dt)`, clipping and renormalizing.
//!
//! The density history also drives the reversed diffusion with drift
//! `-b + d/dx (sigma^2 p) / p`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::sde::{path_rng, PathSample, TimeGrid};

/// Stability factor of the explicit diffusion step, `dt <= 0.4 dx^2 / max sigma^2`.
pub const STABILITY_FACTOR: f64 = 0.4;
/// Densities below this floor make the reversed drift undefined.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Total mass below which the reweighted density counts as diverged.
pub const MIN_MASS: f64 = 1e-12;
/// Half-width of the default grid in initial standard deviations.
pub const GRID_HALF_WIDTH_SD: f64 = 8.0;

pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Scalar signal `dX = b(t,X) dt + sigma(t,X) dW` observed through
/// `dY = h(t,X) dt + kappa(t) dB`.
#[derive(Clone)]
pub struct NonlinearModelSpec {
    drift: SpaceTimeFn,
    diffusion: SpaceTimeFn,
    observation: SpaceTimeFn,
    noise_scale: TimeFn,
    pub sigma_min: f64,
    pub lipschitz_bound: f64,
}

impl fmt::Debug for NonlinearModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModelSpec")
            .field("sigma_min", &self.sigma_min)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .finish_non_exhaustive()
    }
}

impl NonlinearModelSpec {
    pub fn new(
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        observation: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        noise_scale: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            observation: Arc::new(observation),
            noise_scale: Arc::new(noise_scale),
            sigma_min: 1e-8,
            lipschitz_bound: 1e6,
        }
    }

    /// `b = a x`, `sigma = c`, `h = h x`, `kappa` constant.
    pub fn linear(a: f64, c: f64, h: f64, kappa: f64) -> Self {
        Self::new(
            move |_, x| a * x,
            move |_, _| c,
            move |_, x| h * x,
            move |_| kappa,
        )
    }

    pub fn with_sigma_min(mut self, sigma_min: f64) -> Self {
        self.sigma_min = sigma_min;
        self
    }

    pub fn drift(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }

    pub fn diffusion(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }

    pub fn observation(&self, t: f64, x: f64) -> f64 {
        (self.observation)(t, x)
    }

    pub fn noise_scale(&self, t: f64) -> f64 {
        (self.noise_scale)(t)
    }

    /// Check the operational preconditions on the grid at time `t`:
    /// `sigma >= sigma_min`, `kappa != 0`, and drift/diffusion difference
    /// quotients between neighbouring cells within `lipschitz_bound`.
    pub fn validate_on(&self, grid: &DensityGrid, t: f64) -> Result<()> {
        let k = self.noise_scale(t);
        if !(k != 0.0 && k.is_finite()) {
            return Err(invalid(format!("observation noise scale is {k} at t={t}")));
        }
        let dx = grid.dx();
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..grid.n_cells() {
            let x = grid.midpoint(i);
            let (b, s) = (self.drift(t, x), self.diffusion(t, x));
            if !(s >= self.sigma_min) {
                return Err(invalid(format!(
                    "diffusion {s} below sigma_min {} at x={x}",
                    self.sigma_min
                )));
            }
            if let Some((pb, ps)) = prev {
                let slope = ((b - pb).abs() + (s - ps).abs()) / dx;
                if !(slope <= self.lipschitz_bound) {
                    return Err(invalid(format!(
                        "coefficients exceed the Lipschitz bound {} near x={x}",
                        self.lipschitz_bound
                    )));
                }
            }
            prev = Some((b, s));
        }
        Ok(())
    }
}

/// Density on `[x_min, x_max]` as cell averages.
///
/// The integral is the trapezoidal rule through the midpoint values with
/// constant half-cell end caps, which equals `dx * sum(values)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    x_min: f64,
    x_max: f64,
    values: Vec<f64>,
}

impl DensityGrid {
    /// Normalizes the values; rejects negative, non-finite or zero mass input.
    pub fn new(x_min: f64, x_max: f64, values: Vec<f64>) -> Result<Self> {
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(invalid("density grid needs finite bounds with x_max > x_min"));
        }
        if values.len() < 3 {
            return Err(invalid("density grid needs at least 3 cells"));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("density values must be finite and non-negative"));
        }
        let mut grid = Self {
            x_min,
            x_max,
            values,
        };
        let mass = grid.mass();
        if !(mass > 0.0) {
            return Err(invalid("density has zero mass"));
        }
        grid.scale(1.0 / mass);
        Ok(grid)
    }

    pub fn from_fn(x_min: f64, x_max: f64, n_cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = (x_max - x_min) / n_cells as f64;
        let values = (0..n_cells).map(|i| f(x_min + (i as f64 + 0.5) * dx)).collect();
        Self::new(x_min, x_max, values)
    }

    /// Discretized `Normal(mean, var)` on `mean +- 8 sd`.
    pub fn gaussian(mean: f64, var: f64, n_cells: usize) -> Result<Self> {
        if !(var > 0.0) {
            return Err(invalid("Gaussian density needs positive variance"));
        }
        let half = GRID_HALF_WIDTH_SD * var.sqrt();
        Self::gaussian_on(mean, var, mean - half, mean + half, n_cells)
    }

    pub fn gaussian_on(mean: f64, var: f64, x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        Self::from_fn(x_min, x_max, n_cells, |x| {
            (-(x - mean).powi(2) / (2.0 * var)).exp()
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.values.len() as f64
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn mass(&self) -> f64 {
        self.dx() * self.values.iter().sum::<f64>()
    }

    fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            x_min: self.x_min,
            x_max: self.x_max,
            values,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Linear interpolation between midpoints, constant in the end half-cells.
    pub fn density_at(&self, x: f64) -> f64 {
        let (j, w) = self.bracket(x);
        (1.0 - w) * self.values[j] + w * self.values[j + 1]
    }

    /// Neighbouring midpoints `(j, j + 1)` around `x` and the weight of `j + 1`.
    fn bracket(&self, x: f64) -> (usize, f64) {
        let u = (x - self.x_min) / self.dx() - 0.5;
        let last = self.values.len() - 2;
        let j = (u.floor().max(0.0) as usize).min(last);
        (j, (u - j as f64).clamp(0.0, 1.0))
    }

    /// Draw from the density: a cell by its mass, then uniformly inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.values.iter().sum();
        let mut target = rng.random::<f64>() * total;
        for (i, v) in self.values.iter().enumerate() {
            if target < *v {
                return self.x_min + (i as f64 + target / v) * self.dx();
            }
            target -= v;
        }
        self.midpoint(self.values.len() - 1)
    }
}

/// Mean and variance of the density. The variance includes the within-cell
/// spread `dx^2 / 12`.
pub fn density_moments(p: &DensityGrid) -> (f64, f64) {
    let dx = p.dx();
    let mass = p.mass();
    let mean = p
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| p.midpoint(i) * v)
        .sum::<f64>()
        * dx
        / mass;
    let var = p
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (p.midpoint(i) - mean).powi(2) * v)
        .sum::<f64>()
        * dx
        / mass
        + dx * dx / 12.0;
    (mean, var)
}

/// Largest stable explicit step for this model and grid at time `t`.
pub fn stable_dt(p: &DensityGrid, model: &NonlinearModelSpec, t: f64) -> f64 {
    let dx = p.dx();
    let max_s2 = (0..p.n_cells())
        .map(|i| model.diffusion(t, p.midpoint(i)).powi(2))
        .fold(0.0, f64::max);
    if max_s2 == 0.0 {
        f64::INFINITY
    } else {
        STABILITY_FACTOR * dx * dx / max_s2
    }
}

/// One explicit conservative Fokker–Planck step with zero-flux walls.
pub fn fokker_planck_step(
    p: &DensityGrid,
    model: &NonlinearModelSpec,
    t: f64,
    dt: f64,
) -> Result<DensityGrid> {
    if !(dt > 0.0) {
        return Err(invalid("time step must be positive"));
    }
    let bound = stable_dt(p, model, t);
    if dt > bound {
        return Err(Error::StabilityBound {
            dt,
            suggested_dt: bound,
        });
    }
    let n = p.n_cells();
    let dx = p.dx();
    let g: Vec<f64> = (0..n)
        .map(|i| model.diffusion(t, p.midpoint(i)).powi(2) * p.values[i])
        .collect();
    // flux[i] is the flux through the interface between cells i and i + 1.
    let flux: Vec<f64> = (0..n - 1)
        .map(|i| {
            let xi = p.x_min + (i as f64 + 1.0) * dx;
            model.drift(t, xi) * 0.5 * (p.values[i] + p.values[i + 1]) - 0.5 * (g[i + 1] - g[i]) / dx
        })
        .collect();
    let ratio = dt / dx;
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let right = if i + 1 < n { flux[i] } else { 0.0 };
            let left = if i > 0 { flux[i - 1] } else { 0.0 };
            p.values[i] - ratio * (right - left)
        })
        .collect();
    if values.iter().any(|v| *v < 0.0) {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = p.with_values(values);
        let mass = out.mass();
        out.scale(1.0 / mass);
        return Ok(out);
    }
    Ok(p.with_values(values))
}

/// Transport then observation update for increment `dy` over `[t, t + dt]`.
pub fn ks_update(
    p: &DensityGrid,
    model: &NonlinearModelSpec,
    t: f64,
    dt: f64,
    dy: f64,
) -> Result<DensityGrid> {
    let kappa = model.noise_scale(t);
    if !(kappa != 0.0 && kappa.is_finite()) {
        return Err(invalid(format!("observation noise scale is {kappa} at t={t}")));
    }
    let q = fokker_planck_step(p, model, t, dt)?;
    let dx = q.dx();
    let h: Vec<f64> = (0..q.n_cells())
        .map(|i| model.observation(t, q.midpoint(i)))
        .collect();
    if h.iter().all(|v| *v == 0.0) {
        return Ok(q);
    }
    let pi_h = h.iter().zip(&q.values).map(|(h, v)| h * v).sum::<f64>() * dx;
    let surprise = (dy - pi_h * dt) / (kappa * kappa);
    let values: Vec<f64> = q
        .values
        .iter()
        .zip(&h)
        .map(|(v, h)| (v * (1.0 + (h - pi_h) * surprise)).max(0.0))
        .collect();
    let mut out = q.with_values(values);
    let mass = out.mass();
    if !(mass >= MIN_MASS) {
        return Err(Error::FilterDivergence { time: t + dt, mass });
    }
    out.scale(1.0 / mass);
    Ok(out)
}

/// Reversed drift `-b(t,x) + d/dx (sigma^2 p)(x) / p(x)` with central
/// differences on the grid, interpolated linearly between midpoints.
pub fn reversed_drift_from_density(
    p: &DensityGrid,
    model: &NonlinearModelSpec,
    t: f64,
    x: f64,
) -> Result<f64> {
    if !p.contains(x) {
        return Err(invalid(format!(
            "x={x} outside the density grid [{}, {}]",
            p.x_min, p.x_max
        )));
    }
    let (j, w) = p.bracket(x);
    let density = (1.0 - w) * p.values[j] + w * p.values[j + 1];
    if !(density >= DENSITY_FLOOR) {
        return Err(Error::ReversalUndefined { time: t, x, density });
    }
    let n = p.n_cells();
    let dx = p.dx();
    let g = |i: usize| model.diffusion(t, p.midpoint(i)).powi(2) * p.values[i];
    let dg = |i: usize| {
        if i == 0 {
            (g(1) - g(0)) / dx
        } else if i == n - 1 {
            (g(n - 1) - g(n - 2)) / dx
        } else {
            (g(i + 1) - g(i - 1)) / (2.0 * dx)
        }
    };
    let slope = (1.0 - w) * dg(j) + w * dg(j + 1);
    Ok(-model.drift(t, x) + slope / density)
}

/// Densities recorded at every point of a time grid.
#[derive(Debug, Clone)]
pub struct DensityHistory {
    pub grid: TimeGrid,
    pub densities: Vec<DensityGrid>,
}

/// Unobserved evolution: `substeps` Fokker–Planck steps per recording step.
pub fn run_fokker_planck(
    p0: &DensityGrid,
    model: &NonlinearModelSpec,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<DensityHistory> {
    let substeps = substeps.max(1);
    let h = grid.dt() / substeps as f64;
    let mut p = p0.clone();
    let mut densities = vec![p.clone()];
    for i in 0..grid.n_steps() {
        for s in 0..substeps {
            p = fokker_planck_step(&p, model, grid.time(i) + s as f64 * h, h)?;
        }
        densities.push(p.clone());
    }
    Ok(DensityHistory {
        grid: *grid,
        densities,
    })
}

/// Grid filter driven by a scalar observation path (only increments used).
pub fn run_grid_filter(
    p0: &DensityGrid,
    model: &NonlinearModelSpec,
    observations: &PathSample,
) -> Result<DensityHistory> {
    if observations.dim() != 1 {
        return Err(invalid("grid filter needs a scalar observation path"));
    }
    model.validate_on(p0, observations.grid.t_start())?;
    let grid = observations.grid;
    let dt = grid.dt();
    let mut p = p0.clone();
    let mut densities = vec![p.clone()];
    for i in 0..grid.n_steps() {
        let dy = observations.values[i + 1][0] - observations.values[i][0];
        p = ks_update(&p, model, grid.time(i), dt, dy)?;
        densities.push(p.clone());
    }
    Ok(DensityHistory { grid, densities })
}

/// Backward paths of the density-reversed diffusion. `paths[k][i]` is the
/// value of path `k` at grid time `i`; flagged paths left the grid or hit a
/// region where the density is below the floor, and hold `NaN` from there on.
#[derive(Debug, Clone)]
pub struct DensityReversal {
    pub grid: TimeGrid,
    pub paths: Vec<Vec<f64>>,
    pub flagged: Vec<bool>,
}

impl DensityReversal {
    /// Values at grid index `i` over unflagged paths.
    pub fn values_at(&self, i: usize) -> Vec<f64> {
        self.paths
            .iter()
            .zip(&self.flagged)
            .filter(|(_, f)| !**f)
            .map(|(p, _)| p[i])
            .collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

/// Simulate the reversed diffusion from `starts` at the final history time
/// back to the first, with Euler steps evaluated at the later end of each
/// step (the start of the step in reversed time).
pub fn simulate_density_reversal(
    history: &DensityHistory,
    model: &NonlinearModelSpec,
    starts: &[f64],
    seed: u64,
) -> DensityReversal {
    let grid = history.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let results: Vec<(Vec<f64>, bool)> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &x0)| {
            let mut rng = path_rng(seed, k as u64);
            let mut path = vec![f64::NAN; n + 1];
            let mut x = x0;
            path[n] = x;
            for j in (1..=n).rev() {
                let t = grid.time(j);
                let p = &history.densities[j];
                let Ok(drift) = reversed_drift_from_density(p, model, t, x) else {
                    return (path, true);
                };
                let z: f64 = rng.sample(StandardNormal);
                x += drift * dt + model.diffusion(t, x) * sqrt_dt * z;
                if !p.contains(x) {
                    return (path, true);
                }
                path[j - 1] = x;
            }
            (path, false)
        })
        .collect();
    let (paths, flagged) = results.into_iter().unzip();
    DensityReversal {
        grid,
        paths,
        flagged,
    }
}
