//! Time grids, time-varying coefficient matrices and Euler–Maruyama
//! simulation of the linear signal/observation system
//!
//! ```text
//! dX = (A(t) X + D(t) u(t)) dt + C(t) dW
//! dY = H(t) X dt + K(t) dB
//! ```
//!
//! plus Gaussian log-density and score helpers.
//!
//! Randomness: every path owns one ChaCha20 stream. [`path_rng`] keys the
//! generator with the master seed and selects the stream by path index, so
//! ensembles are reproducible and independent of evaluation order.
//! [`derive_seed`] splits a master seed into labelled sub-seeds the same way.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// Largest accepted condition number of the observation noise matrix K(t).
pub const MAX_NOISE_CONDITION: f64 = 1e12;

/// Uniform time grid `t_start = t_0 < t_1 < ... < t_n = t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn uniform(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) {
            return Err(invalid("grid endpoints must be finite"));
        }
        if t_end <= t_start {
            return Err(invalid(format!(
                "grid end {t_end} must exceed grid start {t_start}"
            )));
        }
        if n_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    /// Grid on `[t_start, t_end]` with step as close as possible to `dt`.
    pub fn with_step(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        let n = ((t_end - t_start) / dt).round().max(1.0) as usize;
        Self::uniform(t_start, t_end, n)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points (`n_steps + 1`).
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Time of grid point `i`; endpoints are exact.
    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_start + (self.t_end - self.t_start) * (i as f64) / (self.n_steps as f64)
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.time(i))
    }

    /// Greatest grid index whose time is `<= t` (up to a relative tolerance of
    /// `1e-9` steps). `None` when `t` precedes the grid.
    pub fn index_at_or_before(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t_start) / self.dt();
        if pos < -1e-9 {
            return None;
        }
        Some(((pos + 1e-9).floor() as usize).min(self.n_steps))
    }

    /// Index of the grid point equal to `t` (within `1e-9` steps).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t_start) / self.dt();
        let i = pos.round();
        if (pos - i).abs() <= 1e-9 && i >= 0.0 && i <= self.n_steps as f64 {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Nearest grid index to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let pos = ((t - self.t_start) / self.dt()).round();
        pos.clamp(0.0, self.n_steps as f64) as usize
    }

    /// Sub-grid spanning points `first..=last` of this grid.
    pub fn subgrid(&self, first: usize, last: usize) -> Result<Self> {
        if last <= first || last > self.n_steps {
            return Err(invalid(format!(
                "sub-grid {first}..={last} outside grid with {} steps",
                self.n_steps
            )));
        }
        Self::uniform(self.time(first), self.time(last), last - first)
    }

    /// Same points up to `1e-9` steps.
    pub fn aligned_with(&self, other: &TimeGrid) -> bool {
        let tol = 1e-9 * self.dt();
        self.n_steps == other.n_steps
            && (self.t_start - other.t_start).abs() <= tol
            && (self.t_end - other.t_end).abs() <= tol
    }
}

/// Make a uniform grid with `n_steps` steps on `[t_start, t_end]`.
pub fn make_uniform_grid(t_start: f64, t_end: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(t_start, t_end, n_steps)
}

/// Matrix-valued function of time.
///
/// Sampled functions are piecewise constant on their grid: between grid
/// points the left sample applies. Times outside the grid clamp to the
/// nearest end sample.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFunction {
    Constant(DMatrix<f64>),
    Sampled {
        grid: TimeGrid,
        samples: Vec<DMatrix<f64>>,
    },
}

impl MatrixFunction {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self::Constant(m)
    }

    pub fn scalar(v: f64) -> Self {
        Self::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn sampled(grid: TimeGrid, samples: Vec<DMatrix<f64>>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(invalid(format!(
                "{} samples for a grid of {} points",
                samples.len(),
                grid.len()
            )));
        }
        let shape = samples[0].shape();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(invalid("sampled matrix function changes shape over time"));
        }
        Ok(Self::Sampled { grid, samples })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        Self::sampled(grid, grid.times().map(f).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Constant(m) => m.shape(),
            Self::Sampled { samples, .. } => samples[0].shape(),
        }
    }

    pub fn eval(&self, t: f64) -> &DMatrix<f64> {
        match self {
            Self::Constant(m) => m,
            Self::Sampled { grid, samples } => {
                let i = grid.index_at_or_before(t).unwrap_or(0);
                &samples[i]
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(m) => m.iter().all(|v| *v == 0.0),
            Self::Sampled { samples, .. } => samples.iter().all(|m| m.iter().all(|v| *v == 0.0)),
        }
    }
}

/// Linear signal/observation model.
///
/// Dimensions: signal `n`, signal noise `m`, control `k`, observation `p`.
/// The control `u` is a `k x 1` matrix function and defaults to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelSpec {
    pub a: MatrixFunction,
    pub c: MatrixFunction,
    pub d: MatrixFunction,
    pub h: MatrixFunction,
    pub k: MatrixFunction,
    pub control: MatrixFunction,
}

impl LinearModelSpec {
    pub fn new(
        a: MatrixFunction,
        c: MatrixFunction,
        d: MatrixFunction,
        h: MatrixFunction,
        k: MatrixFunction,
    ) -> Result<Self> {
        let control = MatrixFunction::zeros(d.shape().1, 1);
        let model = Self {
            a,
            c,
            d,
            h,
            k,
            control,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Scalar model `dX = a X dt + c dW`, `dY = h X dt + kappa dB`.
    pub fn scalar(a: f64, c: f64, h: f64, kappa: f64) -> Result<Self> {
        Self::new(
            MatrixFunction::scalar(a),
            MatrixFunction::scalar(c),
            MatrixFunction::scalar(0.0),
            MatrixFunction::scalar(h),
            MatrixFunction::scalar(kappa),
        )
    }

    pub fn with_control(mut self, control: MatrixFunction) -> Result<Self> {
        self.control = control;
        self.check_shapes()?;
        Ok(self)
    }

    pub fn signal_dim(&self) -> usize {
        self.a.shape().0
    }

    pub fn noise_dim(&self) -> usize {
        self.c.shape().1
    }

    pub fn control_dim(&self) -> usize {
        self.d.shape().1
    }

    pub fn observation_dim(&self) -> usize {
        self.h.shape().0
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let (n, n2) = self.a.shape();
        if n != n2 || n == 0 {
            return Err(invalid(format!("A must be square and non-empty, got {n}x{n2}")));
        }
        let expect = |name: &str, got: (usize, usize), rows: usize, cols: Option<usize>| {
            if got.0 != rows || cols.is_some_and(|c| c != got.1) {
                Err(invalid(format!(
                    "{name} has shape {}x{}, expected {rows}x{}",
                    got.0,
                    got.1,
                    cols.map_or("?".to_string(), |c| c.to_string())
                )))
            } else {
                Ok(())
            }
        };
        expect("C", self.c.shape(), n, None)?;
        expect("D", self.d.shape(), n, None)?;
        let p = self.h.shape().0;
        if p == 0 {
            return Err(invalid("observation dimension must be positive"));
        }
        expect("H", self.h.shape(), p, Some(n))?;
        expect("K", self.k.shape(), p, Some(p))?;
        expect("u", self.control.shape(), self.d.shape().1, Some(1))?;
        Ok(())
    }

    /// Reject the model if K(t) is ill-conditioned at any grid time.
    pub fn validate_on(&self, grid: &TimeGrid) -> Result<()> {
        self.check_shapes()?;
        for t in grid.times() {
            let cond = condition_number(self.k.eval(t));
            if !(cond <= MAX_NOISE_CONDITION) {
                return Err(Error::IllConditioned {
                    time: t,
                    condition: cond,
                });
            }
        }
        Ok(())
    }

    /// `D(t) u(t)`.
    pub fn control_drift(&self, t: f64) -> DVector<f64> {
        let du = self.d.eval(t) * self.control.eval(t);
        DVector::from_column_slice(du.as_slice())
    }

    /// Signal drift `A(t) x + D(t) u(t)`.
    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.a.eval(t) * x + self.control_drift(t)
    }
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Path of fixed-dimension vectors, one per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl PathSample {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(invalid("path dimension changes over time"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_scalars(grid: TimeGrid, values: &[f64]) -> Result<Self> {
        Self::new(
            grid,
            values.iter().map(|v| DVector::from_element(1, *v)).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Component `i` of every value.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[i]).collect()
    }

    /// Value at the greatest grid time `<= t`.
    pub fn value_at_or_before(&self, t: f64) -> Option<&DVector<f64>> {
        self.grid.index_at_or_before(t).map(|i| &self.values[i])
    }

    /// Restriction to grid points `first..=last`.
    pub fn slice(&self, first: usize, last: usize) -> Result<PathSample> {
        let grid = self.grid.subgrid(first, last)?;
        Ok(PathSample {
            grid,
            values: self.values[first..=last].to_vec(),
        })
    }
}

/// Many paths on one grid, stored contiguously path by path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl PathEnsemble {
    /// `data` holds `n_paths * grid.len() * dim` values; path `k` at grid
    /// index `i` starts at `(k * grid.len() + i) * dim`.
    pub fn new(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        let stride = grid.len() * dim;
        if dim == 0 || data.len() % stride != 0 {
            return Err(invalid("ensemble data does not tile the grid"));
        }
        Ok(Self { grid, dim, data })
    }

    pub fn zeros(grid: TimeGrid, dim: usize, n_paths: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; n_paths * grid.len() * dim],
        }
    }

    pub fn from_paths(paths: &[PathSample]) -> Result<Self> {
        let first = paths.first().ok_or_else(|| invalid("empty ensemble"))?;
        let dim = first.dim();
        if paths.iter().any(|p| p.grid != first.grid || p.dim() != dim) {
            return Err(invalid("ensemble paths must share grid and dimension"));
        }
        let data = paths
            .iter()
            .flat_map(|p| p.values.iter().flat_map(|v| v.iter().copied()))
            .collect();
        Self::new(first.grid, dim, data)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.data.len() / (self.grid.len() * self.dim)
    }

    pub fn value(&self, k: usize, i: usize) -> &[f64] {
        let start = (k * self.grid.len() + i) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Mutable storage of each path, for filling in parallel.
    pub fn path_chunks_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let stride = self.grid.len() * self.dim;
        self.data.chunks_mut(stride)
    }

    pub fn path(&self, k: usize) -> PathSample {
        PathSample {
            grid: self.grid,
            values: (0..self.grid.len())
                .map(|i| DVector::from_column_slice(self.value(k, i)))
                .collect(),
        }
    }

    pub fn paths(&self) -> Vec<PathSample> {
        (0..self.n_paths()).map(|k| self.path(k)).collect()
    }

    /// Component `c` of every path at grid index `i`.
    pub fn cross_section(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.n_paths()).map(|k| self.value(k, i)[c]).collect()
    }
}

/// Generator for one path: ChaCha20 keyed by `master_seed`, stream `stream`.
pub fn path_rng(master_seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Independent sub-seed for a labelled purpose: the first word of stream
/// `tag` of the generator keyed by `master_seed`.
pub fn derive_seed(master_seed: u64, tag: u64) -> u64 {
    path_rng(master_seed, tag.wrapping_add(1 << 32)).next_u64()
}

/// Fill `out` with independent `Normal(0, scale^2)` draws.
pub(crate) fn fill_normal<R: Rng + ?Sized>(rng: &mut R, scale: f64, out: &mut DVector<f64>) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// Euler–Maruyama path of the linear signal, deterministic given `seed`.
pub fn simulate_linear_signal(
    model: &LinearModelSpec,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathSample> {
    model.check_shapes()?;
    let n = model.signal_dim();
    if x0.len() != n {
        return Err(invalid(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut rng = path_rng(seed, 0);
    let mut dw = DVector::zeros(model.noise_dim());
    let mut values = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    values.push(x.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        fill_normal(&mut rng, sqrt_dt, &mut dw);
        x = &x + model.drift(t, &x) * dt + model.c.eval(t) * &dw;
        values.push(x.clone());
    }
    PathSample::new(*grid, values)
}

/// Observation path with `Y_0 = 0` and `dY = H X dt + K dB`.
pub fn simulate_observation(
    model: &LinearModelSpec,
    signal: &PathSample,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathSample> {
    if !signal.grid.aligned_with(grid) {
        return Err(invalid("signal grid does not match the requested grid"));
    }
    if signal.dim() != model.signal_dim() {
        return Err(invalid("signal dimension does not match the model"));
    }
    model.check_shapes()?;
    let p = model.observation_dim();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut rng = path_rng(seed, 0);
    let mut db = DVector::zeros(p);
    let mut y = DVector::zeros(p);
    let mut values = Vec::with_capacity(grid.len());
    values.push(y.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        fill_normal(&mut rng, sqrt_dt, &mut db);
        y = &y + model.h.eval(t) * &signal.values[i] * dt + model.k.eval(t) * &db;
        values.push(y.clone());
    }
    PathSample::new(*grid, values)
}

fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite { what });
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite { what });
    }
    Ok(())
}

fn cholesky(cov: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    check_symmetric(cov, "covariance")?;
    cov.clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "covariance" })
}

/// Log-density of `Normal(mean, cov)` at `x`.
pub fn gaussian_log_density(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    check_dims(mean, cov, x)?;
    let chol = cholesky(cov)?;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("Cholesky factor is invertible");
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let n = mean.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared()))
}

/// Score `grad_x log phi(x) = -cov^{-1} (x - mean)`.
pub fn gaussian_score(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(mean, cov, x)?;
    let chol = cholesky(cov)?;
    Ok(-chol.solve(&(x - mean)))
}

fn check_dims(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<()> {
    let n = mean.len();
    if cov.shape() != (n, n) || x.len() != n {
        return Err(invalid("Gaussian mean, covariance and point dimensions differ"));
    }
    Ok(())
}
