//! Marginal consistency of reversed simulations: a forward ensemble is
//! simulated directly, the reversed sampler is started from its terminal
//! values, and the two are compared at interior checkpoints.

use backfill_core::filter::{FilterTrajectory, GaussianState};
use backfill_core::nonlinear::{
    run_fokker_planck, simulate_density_reversal, DensityGrid, NonlinearModelSpec,
};
use backfill_core::reversal::{build_reversed_model, simulate_backfill, BackfillStart, LawCovSource};
use backfill_core::sde::{make_uniform_grid, LinearModelSpec, TimeGrid};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{mean_var, var_std_err};

pub const CHECKPOINTS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub t: f64,
    pub forward_mean: f64,
    pub reversed_mean: f64,
    pub mean_se: f64,
    pub forward_var: f64,
    pub reversed_var: f64,
    pub var_se: f64,
}

impl Checkpoint {
    fn compare(t: f64, forward: &[f64], reversed: &[f64]) -> Self {
        let (fm, fv) = mean_var(forward);
        let (rm, rv) = mean_var(reversed);
        Self {
            t,
            forward_mean: fm,
            reversed_mean: rm,
            mean_se: (fv / forward.len() as f64 + rv / reversed.len() as f64).sqrt(),
            forward_var: fv,
            reversed_var: rv,
            var_se: var_std_err(forward).hypot(var_std_err(reversed)),
        }
    }

    pub fn mean_z(&self) -> f64 {
        (self.reversed_mean - self.forward_mean) / self.mean_se
    }

    pub fn var_z(&self) -> f64 {
        (self.reversed_var - self.forward_var) / self.var_se
    }

    pub fn within(&self, k: f64) -> bool {
        self.mean_z().abs() <= k && self.var_z().abs() <= k
    }
}

fn checkpoint_indices(grid: &TimeGrid) -> Vec<usize> {
    CHECKPOINTS.iter().map(|t| grid.index_of(*t).unwrap()).collect()
}

/// Scalar filter `a = -1, c = 1, h = 1, kappa = 0.5` from `X_hat(0) = 1`,
/// `P(0) = 0.5` on `[0, 1]` with `dt = 1e-3`. The forward ensemble follows
/// the filter SDE `dX_hat = a X_hat dt + (P h / kappa) dB`.
pub fn linear_reversal_marginals(n_paths: usize, seed: u64) -> Vec<Checkpoint> {
    let (a, c, h, kappa) = (-1.0, 1.0, 1.0, 0.5);
    let grid = make_uniform_grid(0.0, 1.0, 1000).unwrap();
    let model = LinearModelSpec::scalar(a, c, h, kappa).unwrap();
    let init = GaussianState::scalar(1.0, 0.5).unwrap();
    let filter = FilterTrajectory::predicted(&model, &init, &grid).unwrap();
    let gains: Vec<f64> = filter.covariances().map(|p| p[(0, 0)] * h / kappa).collect();

    let idx = checkpoint_indices(&grid);
    let dt = grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward = vec![Vec::with_capacity(n_paths); idx.len()];
    let mut terminal = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut x = 1.0;
        let mut next = 0;
        for i in 0..grid.n_steps() {
            let z: f64 = rng.sample(StandardNormal);
            x += a * x * dt + gains[i] * dt.sqrt() * z;
            if next < idx.len() && idx[next] == i + 1 {
                forward[next].push(x);
                next += 1;
            }
        }
        terminal.push(DVector::from_element(1, x));
    }

    let reversed = build_reversed_model(&model, &filter, LawCovSource::FilterMeanLaw).unwrap();
    let start = BackfillStart::Samples(terminal);
    let ensemble = simulate_backfill(&reversed, &start, 0.0, n_paths, seed ^ 0x5eed).unwrap();
    idx.iter()
        .zip(&forward)
        .map(|(&i, f)| Checkpoint::compare(grid.time(i), f, &ensemble.cross_section(i, 0)))
        .collect()
}

/// Unobserved OU `dX = -X dt + dW` from `Normal(2, 0.5)` on `[0, 1]`:
/// density history on 400 cells (Fokker–Planck substep `1e-4`, recorded
/// every `1e-3`), reversed with the density score.
pub fn density_reversal_marginals(n_paths: usize, seed: u64) -> (Vec<Checkpoint>, usize) {
    let grid = make_uniform_grid(0.0, 1.0, 1000).unwrap();
    let model = NonlinearModelSpec::new(|_, x| -x, |_, _| 1.0, |_, _| 0.0, |_| 1.0);
    let p0 = DensityGrid::gaussian(2.0, 0.5, 400).unwrap();
    let history = run_fokker_planck(&p0, &model, &grid, 10).unwrap();

    let idx = checkpoint_indices(&grid);
    let dt = grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward = vec![Vec::with_capacity(n_paths); idx.len()];
    let mut terminal = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let z: f64 = rng.sample(StandardNormal);
        let mut x = 2.0 + 0.5f64.sqrt() * z;
        let mut next = 0;
        for i in 0..grid.n_steps() {
            let z: f64 = rng.sample(StandardNormal);
            x += -x * dt + dt.sqrt() * z;
            if next < idx.len() && idx[next] == i + 1 {
                forward[next].push(x);
                next += 1;
            }
        }
        terminal.push(x);
    }

    let reversal = simulate_density_reversal(&history, &model, &terminal, seed ^ 0x5eed);
    let checkpoints = idx
        .iter()
        .zip(&forward)
        .map(|(&i, f)| Checkpoint::compare(grid.time(i), f, &reversal.values_at(i)))
        .collect();
    (checkpoints, reversal.flagged_count())
}
