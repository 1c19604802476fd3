//! Continuous-time Kalman–Bucy filter.
//!
//! The covariance follows the Riccati equation
//!
//! ```text
//! dP/dt = A P + P A' - P H' (K K')^{-1} H P + C C'
//! ```
//!
//! integrated with classical RK4; the conditional mean is an Euler
//! discretization of `dm = (A m + D u) dt + P H' K'^{-1} dB`, driven by the
//! innovations `dB = K^{-1} (dY - H m dt)`.
//!
//! Coefficients are treated as piecewise constant over each grid step (left
//! sample), so every RK4 stage of a step sees the same matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::sde::{LinearModelSpec, MatrixFunction, PathSample, TimeGrid};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Gaussian law `Normal(mean, cov)` with symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    /// Validates symmetry and clips eigenvalues in `[-1e-10, 0)` to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(invalid(format!(
                "covariance shape {:?} does not match mean length {n}",
                cov.shape()
            )));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite { what: "state covariance" });
        }
        let (cov, min_eig) = clip_psd(&cov);
        if min_eig < -PSD_TOL * scale {
            return Err(Error::NotPositiveDefinite { what: "state covariance" });
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetrize and clip negative eigenvalues; also returns the smallest
/// eigenvalue before clipping.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return (DMatrix::from_element(1, 1, v.max(0.0)), v);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, min);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    ((&out + out.transpose()) * 0.5, min)
}

/// Filter law sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<GaussianState>,
}

impl FilterTrajectory {
    pub fn new(grid: TimeGrid, states: Vec<GaussianState>) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(invalid(format!(
                "{} filter states for a grid of {} points",
                states.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, states })
    }

    /// Filter law without an observation record: means follow the prior mean
    /// ODE, covariances the Riccati equation. Suitable for laws that only
    /// use the covariance and the initial state.
    pub fn predicted(model: &LinearModelSpec, init: &GaussianState, grid: &TimeGrid) -> Result<Self> {
        let covs = integrate_riccati(model, &init.cov, grid)?;
        let prior = prior_moments(model, init, grid)?;
        let states = prior
            .into_iter()
            .zip(covs)
            .map(|(p, cov)| GaussianState { mean: p.mean, cov })
            .collect();
        Self::new(*grid, states)
    }

    pub fn means(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.states.iter().map(|s| &s.mean)
    }

    pub fn covariances(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.states.iter().map(|s| &s.cov)
    }

    pub fn last(&self) -> &GaussianState {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Cumulative innovations `B(t)` on the filter grid, `B(t_0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationsPath(pub PathSample);

impl InnovationsPath {
    /// Per-step increments `dB`.
    pub fn increments(&self) -> Vec<DVector<f64>> {
        self.0.values.windows(2).map(|w| &w[1] - &w[0]).collect()
    }
}

/// `(K K')^{-1}` at time `t`.
fn noise_precision(model: &LinearModelSpec, t: f64) -> Result<DMatrix<f64>> {
    let k = model.k.eval(t);
    (k * k.transpose())
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::IllConditioned {
            time: t,
            condition: f64::INFINITY,
        })
}

fn noise_inverse(model: &LinearModelSpec, t: f64) -> Result<DMatrix<f64>> {
    model.k.eval(t).clone().try_inverse().ok_or(Error::IllConditioned {
        time: t,
        condition: f64::INFINITY,
    })
}

/// Diffusion coefficient of the filter mean, `G = P (K^-1 H)'`.
pub fn innovation_gain(model: &LinearModelSpec, p: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let k_inv = noise_inverse(model, t)?;
    Ok(p * (k_inv * model.h.eval(t)).transpose())
}

/// Largest `dt * |Jacobian|` taken in one RK4 Riccati step.
const RK4_STEP_LIMIT: f64 = 0.5;
const MAX_SUBSTEPS: usize = 100_000;

fn rk4_step(p: &DMatrix<f64>, dt: f64, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let k1 = f(p);
    let k2 = f(&(p + &k1 * (dt / 2.0)));
    let k3 = f(&(p + &k2 * (dt / 2.0)));
    let k4 = f(&(p + &k3 * dt));
    p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn checked_psd(p: &DMatrix<f64>, time: f64) -> Result<DMatrix<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::RiccatiUnstable {
            time,
            min_eigenvalue: f64::NAN,
        });
    }
    let (clipped, min_eig) = clip_psd(p);
    if min_eig < -PSD_TOL * p.amax().max(1.0) {
        return Err(Error::RiccatiUnstable {
            time,
            min_eigenvalue: min_eig,
        });
    }
    Ok(clipped)
}

/// Riccati covariance at every grid time, starting from `p0`.
pub fn integrate_riccati(
    model: &LinearModelSpec,
    p0: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    model.validate_on(grid)?;
    let n = model.signal_dim();
    if p0.shape() != (n, n) {
        return Err(invalid(format!("P0 must be {n}x{n}")));
    }
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.len());
    let mut p = checked_psd(p0, grid.t_start())?;
    out.push(p.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let a = model.a.eval(t);
        let c = model.c.eval(t);
        let h = model.h.eval(t);
        let q = c * c.transpose();
        let s = h.transpose() * noise_precision(model, t)? * h;
        let rhs = |p: &DMatrix<f64>| {
            let ap = a * p;
            &ap + ap.transpose() - p * &s * p + &q
        };
        // Small noise makes the quadratic term stiff; split the step so RK4
        // stays inside its stability region.
        let stiffness = 2.0 * a.norm() + 2.0 * (&p * &s).norm();
        let substeps = ((dt * stiffness / RK4_STEP_LIMIT).ceil() as usize).clamp(1, MAX_SUBSTEPS);
        let h_sub = dt / substeps as f64;
        for _ in 0..substeps {
            p = rk4_step(&p, h_sub, &rhs);
        }
        p = checked_psd(&p, grid.time(i + 1))?;
        out.push(p.clone());
    }
    Ok(out)
}

/// Unconditional law of the signal: mean ODE `m' = A m + D u` and Lyapunov
/// equation `V' = A V + V A' + C C'`, both RK4.
pub fn prior_moments(
    model: &LinearModelSpec,
    init: &GaussianState,
    grid: &TimeGrid,
) -> Result<Vec<GaussianState>> {
    model.check_shapes()?;
    if init.dim() != model.signal_dim() {
        return Err(invalid("initial state dimension does not match the model"));
    }
    let dt = grid.dt();
    let mut mean = init.mean.clone();
    let mut cov = init.cov.clone();
    let mut out = Vec::with_capacity(grid.len());
    out.push(init.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let a = model.a.eval(t);
        let c = model.c.eval(t);
        let q = c * c.transpose();
        let du = model.control_drift(t);
        let f = |m: &DVector<f64>| a * m + &du;
        let k1 = f(&mean);
        let k2 = f(&(&mean + &k1 * (dt / 2.0)));
        let k3 = f(&(&mean + &k2 * (dt / 2.0)));
        let k4 = f(&(&mean + &k3 * dt));
        mean += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        cov = rk4_step(&cov, dt, |v| {
            let av = a * v;
            &av + av.transpose() + &q
        });
        cov = clip_psd(&cov).0;
        out.push(GaussianState {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}

/// Run the Kalman–Bucy filter over an observation path `Y` (any `Y(t_0)`;
/// only increments are used). Returns the filter law at every grid time and
/// the cumulative innovations.
pub fn run_kalman_bucy(
    model: &LinearModelSpec,
    observations: &PathSample,
    init: &GaussianState,
) -> Result<(FilterTrajectory, InnovationsPath)> {
    let grid = observations.grid;
    model.validate_on(&grid)?;
    let n = model.signal_dim();
    let p = model.observation_dim();
    if observations.dim() != p {
        return Err(invalid(format!(
            "observations have dimension {}, model expects {p}",
            observations.dim()
        )));
    }
    if init.dim() != n {
        return Err(invalid("initial state dimension does not match the model"));
    }
    let covs = integrate_riccati(model, &init.cov, &grid)?;
    let dt = grid.dt();

    let mut mean = init.mean.clone();
    let mut innovation = DVector::zeros(p);
    let mut states = Vec::with_capacity(grid.len());
    let mut innovations = Vec::with_capacity(grid.len());
    states.push(GaussianState {
        mean: mean.clone(),
        cov: covs[0].clone(),
    });
    innovations.push(innovation.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let h = model.h.eval(t);
        let k_inv = noise_inverse(model, t)?;
        let dy = &observations.values[i + 1] - &observations.values[i];
        let db = &k_inv * (dy - h * &mean * dt);
        let gain = &covs[i] * (&k_inv * h).transpose();
        mean = &mean + model.drift(t, &mean) * dt + gain * &db;
        innovation += db;
        states.push(GaussianState {
            mean: mean.clone(),
            cov: covs[i + 1].clone(),
        });
        innovations.push(innovation.clone());
    }
    Ok((
        FilterTrajectory::new(grid, states)?,
        InnovationsPath(PathSample::new(grid, innovations)?),
    ))
}

/// Least-squares fit of the scalar template `dX = (a X + b) dt + c dW`
/// observed through `dY = X dt + kappa dB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuCalibration {
    pub a: f64,
    pub a_std_err: f64,
    /// Constant drift term `b`; the mean level is `-b / a` when `a != 0`.
    pub intercept: f64,
    pub c: f64,
    pub c_std_err: f64,
    pub kappa: f64,
    pub n_points: usize,
}

impl OuCalibration {
    /// Linear model with the intercept carried as a unit control through
    /// `D = b`, `u = 1`.
    pub fn model(&self) -> Result<LinearModelSpec> {
        LinearModelSpec::new(
            MatrixFunction::scalar(self.a),
            MatrixFunction::scalar(self.c),
            MatrixFunction::scalar(self.intercept),
            MatrixFunction::scalar(1.0),
            MatrixFunction::scalar(self.kappa),
        )?
        .with_control(MatrixFunction::scalar(1.0))
    }
}

/// Minimum number of dense points accepted by [`calibrate_linear_model`].
pub const MIN_CALIBRATION_POINTS: usize = 100;

/// Regress `x_{k+1} - x_k` on `(1, x_k)`: the slope over `dt` estimates `a`,
/// the residual standard deviation over `sqrt(dt)` estimates `c`.
pub fn calibrate_linear_model(dense: &PathSample, kappa: f64) -> Result<OuCalibration> {
    if dense.dim() != 1 {
        return Err(invalid("calibration supports scalar series only"));
    }
    let n_points = dense.values.len();
    if n_points < MIN_CALIBRATION_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_CALIBRATION_POINTS,
            got: n_points,
        });
    }
    if !(kappa > 0.0) {
        return Err(invalid("observation noise scale must be positive"));
    }
    let x = dense.component(0);
    let dt = dense.grid.dt();
    let m = (n_points - 1) as f64;
    let xs = &x[..n_points - 1];
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let x_mean = xs.iter().sum::<f64>() / m;
    let dx_mean = dx.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|v| (v - x_mean).powi(2)).sum();
    if !(sxx > f64::EPSILON * m * x_mean.abs().max(1.0).powi(2)) {
        return Err(Error::DegenerateRegression(
            "series has no variation".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&dx).map(|(a, b)| (a - x_mean) * (b - dx_mean)).sum();
    let slope = sxy / sxx;
    let alpha = dx_mean - slope * x_mean;
    let rss: f64 = xs
        .iter()
        .zip(&dx)
        .map(|(a, b)| (b - alpha - slope * a).powi(2))
        .sum();
    let s2 = rss / (m - 2.0);
    if !(s2 > 0.0) {
        return Err(Error::DegenerateRegression(
            "zero residual variance".into(),
        ));
    }
    let c = (s2 / dt).sqrt();
    Ok(OuCalibration {
        a: slope / dt,
        a_std_err: (s2 / sxx).sqrt() / dt,
        intercept: alpha / dt,
        c,
        c_std_err: c / (2.0 * (m - 2.0)).sqrt(),
        kappa,
        n_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{make_uniform_grid, simulate_linear_signal, simulate_observation};

    fn grid(t_end: f64, n: usize) -> TimeGrid {
        make_uniform_grid(0.0, t_end, n).unwrap()
    }

    #[test]
    fn riccati_tanh() {
        let m = LinearModelSpec::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let g = grid(1.0, 1000);
        let p = integrate_riccati(&m, &DMatrix::zeros(1, 1), &g).unwrap();
        for (t, pt) in g.times().zip(&p) {
            assert!((pt[(0, 0)] - t.tanh()).abs() < 1e-6);
        }
        assert!((p[1000][(0, 0)] - 0.761594).abs() < 1e-6);
    }

    #[test]
    fn riccati_frozen() {
        let m = LinearModelSpec::new(
            MatrixFunction::zeros(2, 2),
            MatrixFunction::zeros(2, 2),
            MatrixFunction::zeros(2, 1),
            MatrixFunction::zeros(1, 2),
            MatrixFunction::scalar(1.0),
        )
        .unwrap();
        let p0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = integrate_riccati(&m, &p0, &grid(1.0, 50)).unwrap();
        assert!(p.iter().all(|pt| (pt - &p0).amax() < 1e-15));
    }

    #[test]
    fn riccati_lyapunov_decay() {
        let m = LinearModelSpec::scalar(-1.0, 0.0, 0.0, 1.0).unwrap();
        let g = grid(1.0, 1000);
        let p = integrate_riccati(&m, &DMatrix::identity(1, 1), &g).unwrap();
        for (t, pt) in g.times().zip(&p) {
            assert!((pt[(0, 0)] - (-2.0 * t).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn riccati_rejects_indefinite_start() {
        let m = LinearModelSpec::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let r = integrate_riccati(&m, &DMatrix::from_element(1, 1, -1.0), &grid(1.0, 10));
        assert!(matches!(r, Err(Error::RiccatiUnstable { .. })));
    }

    #[test]
    fn stiff_riccati_is_substepped() {
        // Gain 1e6 on a grid of 0.1: one RK4 step per grid step would diverge.
        let m = LinearModelSpec::scalar(0.0, 1.0, 1.0, 1e-3).unwrap();
        let p = integrate_riccati(&m, &DMatrix::from_element(1, 1, 1.0), &grid(1.0, 10)).unwrap();
        // Steady state of P' = 1 - P^2 / kappa^2 is kappa.
        assert!((p.last().unwrap()[(0, 0)] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn uninformative_observations_freeze_mean() {
        let m = LinearModelSpec::scalar(0.0, 1.0, 0.0, 1.0).unwrap();
        let g = grid(1.0, 200);
        let sig = simulate_linear_signal(&m, &DVector::zeros(1), &g, 1).unwrap();
        let obs = simulate_observation(&m, &sig, &g, 2).unwrap();
        let init = GaussianState::scalar(0.7, 1.0).unwrap();
        let (traj, _) = run_kalman_bucy(&m, &obs, &init).unwrap();
        assert!(traj.means().all(|x| x[0] == 0.7));
    }

    #[test]
    fn filter_converges_to_constant_signal() {
        let m = LinearModelSpec::scalar(0.0, 0.0, 1.0, 0.05).unwrap();
        let g = grid(1.0, 1000);
        let mut inside = 0;
        for seed in 0..200 {
            let truth = 1.3;
            let sig = PathSample::from_scalars(g, &[truth; 1001]).unwrap();
            let obs = simulate_observation(&m, &sig, &g, seed).unwrap();
            let init = GaussianState::scalar(0.0, 1.0).unwrap();
            let (traj, _) = run_kalman_bucy(&m, &obs, &init).unwrap();
            let last = traj.last();
            if (last.mean[0] - truth).abs() <= 3.0 * last.cov[(0, 0)].sqrt() {
                inside += 1;
            }
        }
        assert!(inside >= 190, "inside {inside}");
    }

    #[test]
    fn predicted_trajectory_uses_prior_means() {
        let m = LinearModelSpec::scalar(-1.0, 1.0, 1.0, 0.5).unwrap();
        let g = grid(1.0, 100);
        let init = GaussianState::scalar(2.0, 0.5).unwrap();
        let traj = FilterTrajectory::predicted(&m, &init, &g).unwrap();
        assert!((traj.last().mean[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-9);
        let prior = prior_moments(&m, &init, &g).unwrap();
        // Stationary variance is preserved by the Lyapunov equation.
        assert!(prior.iter().all(|s| (s.cov[(0, 0)] - 0.5).abs() < 1e-12));
        assert!(traj.states.iter().all(|s| s.cov[(0, 0)] <= 0.5 + 1e-12));
    }

    #[test]
    fn wrong_observation_dimension_rejected() {
        let m = LinearModelSpec::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let g = grid(1.0, 10);
        let obs = PathSample::new(g, vec![DVector::zeros(2); 11]).unwrap();
        let init = GaussianState::scalar(0.0, 1.0).unwrap();
        assert!(run_kalman_bucy(&m, &obs, &init).is_err());
        let singular = LinearModelSpec::scalar(0.0, 1.0, 1.0, 0.0).unwrap();
        let obs = PathSample::new(g, vec![DVector::zeros(1); 11]).unwrap();
        assert!(matches!(
            run_kalman_bucy(&singular, &obs, &init),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn gaussian_state_validation() {
        assert!(GaussianState::scalar(0.0, -1.0).is_err());
        let s = GaussianState::scalar(0.0, -1e-12).unwrap();
        assert_eq!(s.cov[(0, 0)], 0.0);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianState::new(DVector::zeros(2), asym).is_err());
    }

    fn ou_series(a: f64, c: f64, n: usize, dt: f64, seed: u64) -> PathSample {
        let m = LinearModelSpec::scalar(a, c, 1.0, 1.0).unwrap();
        let g = grid(dt * n as f64, n);
        simulate_linear_signal(&m, &DVector::zeros(1), &g, seed).unwrap()
    }

    #[test]
    fn calibration_recovers_mean_reversion() {
        let mut good = 0;
        for seed in 0..20 {
            let s = ou_series(-1.0, 1.0, 100_000, 0.01, seed);
            let est = calibrate_linear_model(&s, 0.1).unwrap();
            if (est.a + 1.0).abs() <= 0.15 {
                good += 1;
            }
            assert!((est.c - 1.0).abs() < 0.02);
            assert!(est.a_std_err > 0.0 && est.a_std_err < 0.1);
        }
        assert!(good >= 18, "good {good}");
    }

    #[test]
    fn calibration_random_walk() {
        let mut good = 0;
        for seed in 0..20 {
            let s = ou_series(0.0, 1.0, 100_000, 0.01, 100 + seed);
            let est = calibrate_linear_model(&s, 0.1).unwrap();
            if est.a.abs() <= 0.1 {
                good += 1;
            }
        }
        assert!(good >= 18, "good {good}");
    }

    #[test]
    fn calibration_errors() {
        let g = grid(1.0, 200);
        let flat = PathSample::from_scalars(g, &[2.0; 201]).unwrap();
        assert!(matches!(
            calibrate_linear_model(&flat, 0.1),
            Err(Error::DegenerateRegression(_))
        ));
        let short = ou_series(-1.0, 1.0, 50, 0.01, 1);
        assert!(matches!(
            calibrate_linear_model(&short, 0.1),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn calibrated_model_carries_intercept() {
        let est = OuCalibration {
            a: -2.0,
            a_std_err: 0.1,
            intercept: 3.0,
            c: 0.5,
            c_std_err: 0.01,
            kappa: 0.1,
            n_points: 1000,
        };
        let m = est.model().unwrap();
        let d = m.drift(0.0, &DVector::from_element(1, 1.5));
        assert!(d[0].abs() < 1e-15);
    }
}
