//! Bridge scenarios with closed-form or recursively computed answers.

use backfill_core::conditioning::{
    simulate_conditioned_backfill, simulate_guided_backfill, AnchorSet, BridgeSpec,
    ConditionedEnsemble, Guidance, DEFAULT_EPS_HIT,
};
use backfill_core::filter::{FilterTrajectory, GaussianState};
use backfill_core::reversal::{
    build_reversed_model, AffineDrift, BackfillStart, FilterLaw, LawCovSource, ReversedModel,
};
use backfill_core::sde::{make_uniform_grid, LinearModelSpec};
use nalgebra::{DMatrix, DVector};

use super::mean_var;

/// Driftless reversed model `dX = sigma dW` on `[0, span]`.
pub fn brownian_model(sigma: f64, span: f64, n_steps: usize) -> ReversedModel {
    let grid = make_uniform_grid(0.0, span, n_steps).unwrap();
    let m = grid.len();
    let law = FilterLaw::new(
        grid,
        vec![DVector::zeros(1); m],
        vec![DMatrix::from_element(1, 1, 1.0); m],
    )
    .unwrap();
    let zero = AffineDrift {
        matrix: DMatrix::zeros(1, 1),
        offset: DVector::zeros(1),
    };
    ReversedModel::from_reversed_parts(
        vec![zero; m],
        vec![DMatrix::from_element(1, 1, sigma); m],
        law,
    )
    .unwrap()
}

/// Expected Girsanov sum of the Euler Brownian bridge over `n_steps` steps
/// of size `dt` from `y` to `z`. The gap `D = z - X` evolves as
/// `D' = D (1 - dt / r) - sigma sqrt(dt) Z` with `r` the remaining time, so
/// its mean and variance follow exact recursions.
pub fn euler_bridge_kl(sigma: f64, y: f64, z: f64, n_steps: usize, dt: f64) -> f64 {
    let (mut m, mut v) = (z - y, 0.0);
    let mut kl = 0.0;
    for k in 0..n_steps {
        let rem = (n_steps - k) as f64 * dt;
        kl += 0.5 * (m * m + v) / (sigma * sigma * rem * rem) * dt;
        let r = 1.0 - dt / rem;
        m *= r;
        v = v * r * r + sigma * sigma * dt;
    }
    kl
}

/// One comparison of the bridge ensemble with the analytic bridge law.
#[derive(Debug, Clone)]
pub struct BridgeCheck {
    pub t: f64,
    pub mean: f64,
    pub mean_exact: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_exact: f64,
}

impl BridgeCheck {
    pub fn mean_ok(&self, k: f64) -> bool {
        (self.mean - self.mean_exact).abs() <= k * self.mean_se
    }

    pub fn var_rel_err(&self) -> f64 {
        (self.var - self.var_exact).abs() / self.var_exact
    }
}

/// Brownian scenario: `sigma = 0.8`, reversed from `y = 0.5` at `t = 1`
/// through the anchor `(0.4, -0.3)`, `dt = 1e-3`.
pub struct BrownianScenario {
    pub sigma: f64,
    pub y: f64,
    pub anchor: (f64, f64),
    pub spec: BridgeSpec,
}

impl BrownianScenario {
    pub fn new() -> Self {
        Self::with_anchor_value(-0.3)
    }

    pub fn with_anchor_value(z: f64) -> Self {
        let sigma = 0.8;
        let anchor = (0.4, z);
        let spec = BridgeSpec::new(
            brownian_model(sigma, 1.0, 1000),
            AnchorSet::from_scalars(&[anchor]).unwrap(),
            0.0,
            DEFAULT_EPS_HIT,
        )
        .unwrap();
        Self {
            sigma,
            y: 0.5,
            anchor,
            spec,
        }
    }

    pub fn simulate(&self, n_paths: usize, seed: u64) -> ConditionedEnsemble {
        let start = BackfillStart::Point(DVector::from_element(1, self.y));
        simulate_conditioned_backfill(&self.spec, &start, n_paths, seed).unwrap()
    }

    /// Mean and variance against the bridge law inside the span.
    pub fn check(&self, ens: &ConditionedEnsemble, times: &[f64]) -> Vec<BridgeCheck> {
        let (tau, z) = self.anchor;
        let span = 1.0 - tau;
        let grid = ens.paths.grid();
        times
            .iter()
            .map(|&t| {
                let xs = ens.paths.cross_section(grid.index_of(t).unwrap(), 0);
                let (mean, var) = mean_var(&xs);
                let elapsed = 1.0 - t;
                BridgeCheck {
                    t,
                    mean,
                    mean_exact: self.y + (z - self.y) * elapsed / span,
                    mean_se: (var / xs.len() as f64).sqrt(),
                    var,
                    var_exact: self.sigma.powi(2) * elapsed * (span - elapsed) / span,
                }
            })
            .collect()
    }

    pub fn expected_kl(&self) -> f64 {
        let dt = self.spec.reversed().grid().dt();
        euler_bridge_kl(self.sigma, self.y, self.anchor.1, 600, dt)
    }
}

impl Default for BrownianScenario {
    fn default() -> Self {
        Self::new()
    }
}

/// Ensemble-mean KL of the bridge and of the steepened alternatives
/// `beta = 1.5, 2, 3` on the reversed scalar filter (`a = -1, c = 1, h = 1,
/// kappa = 0.5`) over `[0, 1]` with `dt = 2e-3`, anchors `(0.3, 1.2)` and
/// `(0.7, -0.4)`. All four share the noise of `seed`.
pub fn entropy_family(n_paths: usize, seed: u64) -> [f64; 4] {
    let model = LinearModelSpec::scalar(-1.0, 1.0, 1.0, 0.5).unwrap();
    let grid = make_uniform_grid(0.0, 1.0, 500).unwrap();
    let init = GaussianState::scalar(0.0, 0.5).unwrap();
    let filter = FilterTrajectory::predicted(&model, &init, &grid).unwrap();
    let reversed = build_reversed_model(&model, &filter, LawCovSource::FilterMeanLaw).unwrap();
    let anchors = AnchorSet::from_scalars(&[(0.3, 1.2), (0.7, -0.4)]).unwrap();
    let spec = BridgeSpec::new(reversed, anchors, 0.0, DEFAULT_EPS_HIT).unwrap();
    let start = BackfillStart::SampleLaw;
    let run = |g| {
        simulate_guided_backfill(&spec, g, &start, n_paths, seed)
            .unwrap()
            .mean_kl()
    };
    [
        run(Guidance::Bridge),
        run(Guidance::Steepened(1.5)),
        run(Guidance::Steepened(2.0)),
        run(Guidance::Steepened(3.0)),
    ]
}
