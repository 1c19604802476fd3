//! Grid density filter against Kalman–Bucy on a linear model.

use backfill_core::filter::{run_kalman_bucy, GaussianState};
use backfill_core::nonlinear::{density_moments, run_grid_filter, DensityGrid, NonlinearModelSpec};
use backfill_core::sde::{make_uniform_grid, simulate_linear_signal, simulate_observation, LinearModelSpec};
use nalgebra::DVector;

/// Worst relative gaps over every grid time.
#[derive(Debug, Clone, Copy)]
pub struct TrackingGap {
    /// `|mean gap| / max(|KB mean|, sqrt(KB variance))`.
    pub mean: f64,
    /// `|variance gap| / KB variance`.
    pub var: f64,
}

/// `a = -1, c = 1, h = 1, kappa = 1`, prior `Normal(0, 1)` on `[0, 1]`,
/// `dt = 1e-4`, 800 cells over `+-8` prior standard deviations.
pub fn linear_grid_tracking(seed: u64) -> TrackingGap {
    let grid = make_uniform_grid(0.0, 1.0, 10_000).unwrap();
    let model = LinearModelSpec::scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
    let truth = simulate_linear_signal(&model, &DVector::from_element(1, 0.8), &grid, seed).unwrap();
    let y = simulate_observation(&model, &truth, &grid, seed + 1).unwrap();
    let init = GaussianState::scalar(0.0, 1.0).unwrap();
    let (kb, _) = run_kalman_bucy(&model, &y, &init).unwrap();

    let nl = NonlinearModelSpec::linear(-1.0, 1.0, 1.0, 1.0);
    let p0 = DensityGrid::gaussian(0.0, 1.0, 800).unwrap();
    let history = run_grid_filter(&p0, &nl, &y).unwrap();

    let mut gap = TrackingGap { mean: 0.0, var: 0.0 };
    for (state, p) in kb.states.iter().zip(&history.densities) {
        let (m, v) = density_moments(p);
        let (km, kv) = (state.mean[0], state.cov[(0, 0)]);
        gap.mean = gap.mean.max((m - km).abs() / km.abs().max(kv.sqrt()));
        gap.var = gap.var.max((v - kv).abs() / kv);
    }
    gap
}
