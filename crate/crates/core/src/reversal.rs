//! Time reversal of the linear filter dynamics.
//!
//! The filter mean solves `dX = (A X + D u) dt + G dB` with `G = P (K^-1 H)'`.
//! Run backward in calendar time it is again a diffusion with diffusion `G`
//! and drift `-(A x + D u) + a * score(x)`, where `a = G G'` and the score of
//! the Gaussian law `Normal(m, S)` is `-S^-1 (x - m)`. All drifts involved
//! are affine in `x`, so the reversed model stores one `(matrix, offset)`
//! pair per grid time.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::filter::{innovation_gain, prior_moments, FilterTrajectory, GaussianState};
use crate::sde::{fill_normal, path_rng, LinearModelSpec, PathEnsemble, TimeGrid};

/// Relative ridge added to the law covariance before inversion.
pub const COV_REGULARIZATION: f64 = 1e-10;

/// Which Gaussian law supplies the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LawCovSource {
    /// `Normal(X_hat, P_hat)`: the filter's own conditional law.
    #[default]
    FilterCovariance,
    /// Unconditional law of the filter mean: prior mean, covariance
    /// `Cov(X) - P_hat`.
    FilterMeanLaw,
}

/// Gaussian law `Normal(m_t, S_t)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLaw {
    pub grid: TimeGrid,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl FilterLaw {
    pub fn new(grid: TimeGrid, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.len() != grid.len() || covs.len() != grid.len() {
            return Err(invalid("filter law needs one mean and covariance per grid time"));
        }
        let n = means.first().map_or(0, |m| m.len());
        if means.iter().any(|m| m.len() != n) || covs.iter().any(|c| c.shape() != (n, n)) {
            return Err(invalid("filter law dimensions are inconsistent"));
        }
        let covs = covs
            .into_iter()
            .map(|c| GaussianState::new(DVector::zeros(n), c).map(|s| s.cov))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, means, covs })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn state(&self, i: usize) -> GaussianState {
        GaussianState {
            mean: self.means[i].clone(),
            cov: self.covs[i].clone(),
        }
    }

    /// `Normal(X_hat_t, P_hat_t)` read off the filter trajectory.
    pub fn from_filter(filter: &FilterTrajectory) -> Self {
        Self {
            grid: filter.grid,
            means: filter.means().cloned().collect(),
            covs: filter.covariances().cloned().collect(),
        }
    }

    /// Law of the filter mean when `X_0 ~ Normal(X_hat_0, P_hat_0)`: means
    /// from the prior mean ODE, covariance `V_t - P_hat_t` with `V` the
    /// Lyapunov solution from `V_0 = P_hat_0`.
    pub fn mean_law(model: &LinearModelSpec, filter: &FilterTrajectory) -> Result<Self> {
        let prior = prior_moments(model, &filter.states[0], &filter.grid)?;
        let (means, covs) = prior
            .into_iter()
            .zip(filter.covariances())
            .map(|(v, p)| (v.mean, crate::filter::clip_psd(&(v.cov - p)).0))
            .unzip();
        Self::new(filter.grid, means, covs)
    }
}

/// Drift `x -> matrix * x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDrift {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineDrift {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }

    /// `out = matrix * x + offset` without allocating.
    pub fn eval_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.offset);
        out.gemv(1.0, &self.matrix, x, 1.0);
    }
}

/// Reversed diffusion on the calendar grid of the law. `drifts[j]` and
/// `diffusions[j]` are evaluated at forward time `t_j` and drive the step
/// from `t_j` back to `t_{j-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversedModel {
    grid: TimeGrid,
    drifts: Vec<AffineDrift>,
    diffusions: Vec<DMatrix<f64>>,
    law: FilterLaw,
    singular: Vec<bool>,
}

/// Precision `S^-1` after the relative ridge, or `None` when it stays singular.
fn regularized_precision(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    let eps = COV_REGULARIZATION * cov.trace() / n as f64;
    if !(eps > 0.0) {
        return None;
    }
    let reg = cov + DMatrix::identity(n, n) * eps;
    reg.cholesky().map(|c| c.inverse())
}

impl ReversedModel {
    /// Reverse the drifts `b_j(x)` with diffusions `G_j` under `law`.
    pub fn from_parts(
        forward: &[AffineDrift],
        diffusions: Vec<DMatrix<f64>>,
        law: FilterLaw,
    ) -> Result<Self> {
        let grid = law.grid;
        let n = law.dim();
        if forward.len() != grid.len() || diffusions.len() != grid.len() {
            return Err(invalid("drifts and diffusions must cover the law grid"));
        }
        let shape = (n, diffusions[0].ncols());
        if diffusions.iter().any(|g| g.shape() != shape || g.iter().any(|v| !v.is_finite())) {
            return Err(invalid("reversed diffusion must be finite with one row per state"));
        }
        let mut drifts = Vec::with_capacity(grid.len());
        let mut singular = Vec::with_capacity(grid.len());
        for j in 0..grid.len() {
            let b = &forward[j];
            if b.matrix.shape() != (n, n) || b.offset.len() != n {
                return Err(invalid("drift dimension does not match the law"));
            }
            let g = &diffusions[j];
            let mut matrix = -&b.matrix;
            let mut offset = -&b.offset;
            let mut bad = false;
            if g.amax() > 0.0 {
                match regularized_precision(&law.covs[j]) {
                    Some(prec) => {
                        let gain = g * g.transpose() * prec;
                        matrix -= &gain;
                        offset += gain * &law.means[j];
                    }
                    None => bad = true,
                }
            }
            drifts.push(AffineDrift { matrix, offset });
            singular.push(bad);
        }
        Ok(Self {
            grid,
            drifts,
            diffusions,
            law,
            singular,
        })
    }

    /// Reversed dynamics given directly: `drifts[j]` is already the drift in
    /// reversed time. `law` is kept for sampled starts.
    pub fn from_reversed_parts(
        drifts: Vec<AffineDrift>,
        diffusions: Vec<DMatrix<f64>>,
        law: FilterLaw,
    ) -> Result<Self> {
        let grid = law.grid;
        let n = law.dim();
        if drifts.len() != grid.len() || diffusions.len() != grid.len() {
            return Err(invalid("drifts and diffusions must cover the law grid"));
        }
        let shape = (n, diffusions[0].ncols());
        if diffusions.iter().any(|g| g.shape() != shape || g.iter().any(|v| !v.is_finite()))
            || drifts.iter().any(|d| d.matrix.shape() != (n, n) || d.offset.len() != n)
        {
            return Err(invalid("reversed drift or diffusion has the wrong shape"));
        }
        Ok(Self {
            grid,
            singular: vec![false; drifts.len()],
            drifts,
            diffusions,
            law,
        })
    }

    /// Reversal of this reversed model under the same law: recovers the
    /// forward drifts.
    pub fn reversed(&self) -> Result<Self> {
        Self::from_parts(&self.drifts, self.diffusions.clone(), self.law.clone())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.law.dim()
    }

    pub fn law(&self) -> &FilterLaw {
        &self.law
    }

    pub fn drift_at(&self, j: usize) -> Result<&AffineDrift> {
        if self.singular[j] {
            return Err(Error::SingularCovariance {
                time: self.grid.time(j),
            });
        }
        Ok(&self.drifts[j])
    }

    pub fn drifts(&self) -> &[AffineDrift] {
        &self.drifts
    }

    pub fn diffusion_at(&self, j: usize) -> &DMatrix<f64> {
        &self.diffusions[j]
    }

    /// Reversed drift at grid index `j`.
    pub fn drift(&self, j: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.drift_at(j)?.eval(x))
    }
}

/// Reverse the filter dynamics of `model` along `filter`.
pub fn build_reversed_model(
    model: &LinearModelSpec,
    filter: &FilterTrajectory,
    law_cov_source: LawCovSource,
) -> Result<ReversedModel> {
    model.check_shapes()?;
    if filter.states[0].dim() != model.signal_dim() {
        return Err(invalid("filter dimension does not match the model"));
    }
    let grid = filter.grid;
    let law = match law_cov_source {
        LawCovSource::FilterCovariance => FilterLaw::from_filter(filter),
        LawCovSource::FilterMeanLaw => FilterLaw::mean_law(model, filter)?,
    };
    let mut forward = Vec::with_capacity(grid.len());
    let mut diffusions = Vec::with_capacity(grid.len());
    for (j, state) in filter.states.iter().enumerate() {
        let t = grid.time(j);
        forward.push(AffineDrift {
            matrix: model.a.eval(t).clone(),
            offset: model.control_drift(t),
        });
        diffusions.push(innovation_gain(model, &state.cov, t)?);
    }
    ReversedModel::from_parts(&forward, diffusions, law)
}

/// Starting values at the end of the reversed grid.
#[derive(Debug, Clone, PartialEq)]
pub enum BackfillStart {
    /// Every path starts at this point (typically `X_hat(T0)`).
    Point(DVector<f64>),
    /// Independent draws from the law at the final grid time.
    SampleLaw,
    /// One given start per path.
    Samples(Vec<DVector<f64>>),
}

/// Simulate `n_paths` reversed paths from the final grid time back to
/// `target_time`. Paths are returned in calendar order on the subgrid
/// `[target_time, t_end]`.
pub fn simulate_backfill(
    reversed: &ReversedModel,
    start: &BackfillStart,
    target_time: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let grid = reversed.grid;
    let n = reversed.dim();
    let last = grid.n_steps();
    let target = grid
        .index_of(target_time)
        .ok_or_else(|| invalid(format!("target time {target_time} is not a grid point")))?;
    if target >= last {
        return Err(invalid("target time must precede the end of the reversed grid"));
    }
    let starts = StartSampler::new(reversed, start, n_paths)?;
    for j in target + 1..=last {
        reversed.drift_at(j)?;
    }
    let sub = grid.subgrid(target, last)?;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut ensemble = PathEnsemble::zeros(sub, n, n_paths);
    let chunks: Vec<&mut [f64]> = ensemble.path_chunks_mut().collect();
    chunks.into_par_iter().enumerate().for_each(|(k, out)| {
        let mut rng = path_rng(seed, k as u64);
        let mut x = starts.draw(k, &mut rng);
        let at = |i: usize| (i - target) * n..(i - target + 1) * n;
        out[at(last)].copy_from_slice(x.as_slice());
        let mut drift = DVector::zeros(n);
        let mut w = DVector::zeros(reversed.diffusions[0].ncols());
        for j in (target + 1..=last).rev() {
            reversed.drifts[j].eval_into(&x, &mut drift);
            x.axpy(dt, &drift, 1.0);
            fill_normal(&mut rng, sqrt_dt, &mut w);
            x.gemv(1.0, &reversed.diffusions[j], &w, 1.0);
            out[at(j - 1)].copy_from_slice(x.as_slice());
        }
    });
    Ok(ensemble)
}

/// Start values for path `k`, validated once per ensemble.
pub(crate) struct StartSampler<'a> {
    start: &'a BackfillStart,
    mean: DVector<f64>,
    factor: Option<DMatrix<f64>>,
}

impl<'a> StartSampler<'a> {
    pub(crate) fn new(
        reversed: &ReversedModel,
        start: &'a BackfillStart,
        n_paths: usize,
    ) -> Result<Self> {
        let n = reversed.dim();
        let last = reversed.grid.n_steps();
        let factor = match start {
            BackfillStart::Point(x) if x.len() != n => {
                return Err(invalid("start dimension does not match the model"))
            }
            BackfillStart::Samples(xs)
                if xs.len() != n_paths || xs.iter().any(|x| x.len() != n) =>
            {
                return Err(invalid("need one start of the model dimension per path"))
            }
            BackfillStart::SampleLaw => Some(
                regularized_cholesky(&reversed.law.covs[last]).ok_or(
                    Error::SingularCovariance {
                        time: reversed.grid.t_end(),
                    },
                )?,
            ),
            _ => None,
        };
        Ok(Self {
            start,
            mean: reversed.law.means[last].clone(),
            factor,
        })
    }

    pub(crate) fn draw<R: rand::Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        match self.start {
            BackfillStart::Point(x) => x.clone(),
            BackfillStart::Samples(xs) => xs[k].clone(),
            BackfillStart::SampleLaw => {
                let mut z = DVector::zeros(self.mean.len());
                fill_normal(rng, 1.0, &mut z);
                &self.mean + self.factor.as_ref().expect("factor set for sampled starts") * z
            }
        }
    }
}

fn regularized_cholesky(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.amax() == 0.0 {
        return Some(DMatrix::zeros(n, n));
    }
    let eps = COV_REGULARIZATION * cov.trace() / n as f64;
    (cov + DMatrix::identity(n, n) * eps).cholesky().map(|c| c.l())
}
