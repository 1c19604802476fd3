//! The library filter run against the discrete oracle and on a
//! well-specified model.

use backfill_core::filter::{run_kalman_bucy, GaussianState};
use backfill_core::sde::{
    make_uniform_grid, simulate_linear_signal, simulate_observation, LinearModelSpec,
    MatrixFunction,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{discrete_kalman, mean_var, random_stable_model, RandomModel};

pub fn model_of(r: &RandomModel) -> LinearModelSpec {
    LinearModelSpec::new(
        MatrixFunction::constant(r.a.clone()),
        MatrixFunction::constant(r.c.clone()),
        MatrixFunction::zeros(2, 1),
        MatrixFunction::constant(r.h.clone()),
        MatrixFunction::constant(r.k.clone()),
    )
    .unwrap()
}

/// Worst relative discrepancy (means scaled by the largest oracle mean norm,
/// covariances by their own norm) over 20 random stable 2-D models.
pub fn worst_oracle_discrepancy(n_steps: usize) -> f64 {
    let grid = make_uniform_grid(0.0, 1.0, n_steps).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let r = random_stable_model(seed);
        let model = model_of(&r);
        let signal = simulate_linear_signal(&model, &r.x0, &grid, 10 + seed).unwrap();
        let obs = simulate_observation(&model, &signal, &grid, 50 + seed).unwrap();
        let p0 = DMatrix::identity(2, 2) * 0.1;
        let init = GaussianState::new(DVector::zeros(2), p0.clone()).unwrap();
        let (traj, _) = run_kalman_bucy(&model, &obs, &init).unwrap();
        let dy: Vec<_> = obs.values.windows(2).map(|w| &w[1] - &w[0]).collect();
        let (xs, ps) =
            discrete_kalman(&r.a, &r.c, &r.h, &r.k, &DVector::zeros(2), &p0, &dy, grid.dt());
        let scale = xs.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let mean_err = traj
            .means()
            .zip(&xs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale;
        let cov_err = traj
            .covariances()
            .zip(&ps)
            .map(|(a, b)| (a - b).norm() / b.norm())
            .fold(0.0, f64::max);
        worst = worst.max(mean_err).max(cov_err);
    }
    worst
}

/// Normalized innovation increments of a scalar model (`a = -1, c = 0.8,
/// h = 1, kappa = 0.5`) over `10^4` steps on `[0, 10]`, truth started from
/// the prior given to the filter. Returns `(mean, variance, count)`.
pub fn innovation_stats() -> (f64, f64, usize) {
    let model = LinearModelSpec::scalar(-1.0, 0.8, 1.0, 0.5).unwrap();
    let grid = make_uniform_grid(0.0, 10.0, 10_000).unwrap();
    let prior_var: f64 = 0.32;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z0: f64 = rng.sample(StandardNormal);
    let x0 = DVector::from_element(1, prior_var.sqrt() * z0);
    let signal = simulate_linear_signal(&model, &x0, &grid, 3).unwrap();
    let obs = simulate_observation(&model, &signal, &grid, 4).unwrap();
    let init = GaussianState::scalar(0.0, prior_var).unwrap();
    let (_, innov) = run_kalman_bucy(&model, &obs, &init).unwrap();
    let z: Vec<f64> = innov.increments().iter().map(|d| d[0] / grid.dt().sqrt()).collect();
    let (m, v) = mean_var(&z);
    (m, v, z.len())
}
