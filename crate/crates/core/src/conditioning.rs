//! Backfilled paths conditioned on the realized ticks.
//!
//! The reversed model is linear, so the Euler chain from grid index `j` back
//! to an anchor at index `k < j` is Gaussian: `x_k = Phi_j x_j + xi_j + e`
//! with `e ~ Normal(0, Q_j)`. The bridge adds the h-transform term
//! `a_j Phi_j' Q_j^-1 (z - Phi_j x - xi_j)` to the reversed drift, steering
//! each path to the next anchor in reversed time. The last step onto an
//! anchor is replaced by the anchor value itself.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::reversal::{AffineDrift, BackfillStart, ReversedModel, StartSampler};
use crate::sde::{fill_normal, path_rng, PathEnsemble, PathSample, TimeGrid};

/// Default anchor tolerance in units of the series.
pub const DEFAULT_EPS_HIT: f64 = 1e-8;

/// Anchors `(time, value)` in strictly increasing calendar order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<(f64, DVector<f64>)>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        for w in anchors.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(invalid("anchor times must be strictly increasing"));
            }
        }
        if let Some(first) = anchors.first() {
            let n = first.1.len();
            if anchors
                .iter()
                .any(|(t, v)| v.len() != n || !t.is_finite() || v.iter().any(|x| !x.is_finite()))
            {
                return Err(invalid("anchors must be finite with a common dimension"));
            }
        }
        Ok(Self { anchors })
    }

    pub fn empty() -> Self {
        Self {
            anchors: Vec::new(),
        }
    }

    pub fn from_scalars(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            points
                .iter()
                .map(|(t, v)| (*t, DVector::from_element(1, *v)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, DVector<f64>)> {
        self.anchors.iter()
    }

    pub fn times(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.0).collect()
    }

    /// Grid indices of the anchors under `snap`; two anchors on one index
    /// means the grid is too coarse to separate them.
    fn snapped(&self, grid: &TimeGrid, snap: impl Fn(f64) -> Option<usize>) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::with_capacity(self.len());
        for (t, _) in &self.anchors {
            let i = snap(*t).ok_or_else(|| invalid(format!("anchor at t={t} is off the grid")))?;
            if out.last() == Some(&i) {
                let gap = self
                    .anchors
                    .windows(2)
                    .map(|w| w[1].0 - w[0].0)
                    .fold(f64::INFINITY, f64::min);
                return Err(Error::StepTooCoarse {
                    dt: grid.dt(),
                    required_dt: gap,
                });
            }
            out.push(i);
        }
        Ok(out)
    }
}

/// Bridge of a reversed model through a set of anchors, precomputed on the
/// reversed grid. Anchor times snap to the greatest grid time not after them
/// and must land in `[target, end)`; an anchor on the target pins the final
/// value.
#[derive(Debug, Clone)]
pub struct BridgeSpec {
    reversed: ReversedModel,
    anchors: AnchorSet,
    indices: Vec<usize>,
    target: usize,
    eps_hit: f64,
    // Per grid index j > target: the h-transform term and its whitened form
    // `G' Phi' Q^-1 (z - Phi x - xi)`, both affine in x. `None` where no
    // anchor lies ahead in reversed time.
    extra: Vec<Option<(AffineDrift, AffineDrift)>>,
}

impl BridgeSpec {
    pub fn new(
        reversed: ReversedModel,
        anchors: AnchorSet,
        target_time: f64,
        eps_hit: f64,
    ) -> Result<Self> {
        if !(eps_hit > 0.0) {
            return Err(invalid("anchor tolerance must be positive"));
        }
        let grid = *reversed.grid();
        let n = reversed.dim();
        let last = grid.n_steps();
        let target = grid
            .index_of(target_time)
            .ok_or_else(|| invalid(format!("target time {target_time} is not a grid point")))?;
        if target >= last {
            return Err(invalid("target time must precede the end of the reversed grid"));
        }
        if anchors.iter().any(|(_, v)| v.len() != n) {
            return Err(invalid("anchor dimension does not match the model"));
        }
        let indices = anchors.snapped(&grid, |t| grid.index_at_or_before(t))?;
        for (&i, (t, _)) in indices.iter().zip(anchors.iter()) {
            if i < target || i >= last {
                return Err(invalid(format!(
                    "anchor at t={t} is outside the backfill window"
                )));
            }
        }
        for j in target + 1..=last {
            reversed.drift_at(j)?;
        }

        let dt = grid.dt();
        let mut extra = vec![None; grid.len()];
        for (slot, &k) in indices.iter().enumerate() {
            let upper = indices.get(slot + 1).copied().unwrap_or(last);
            let z = &anchors.anchors[slot].1;
            let mut phi = DMatrix::<f64>::identity(n, n);
            let mut xi = DVector::<f64>::zeros(n);
            let mut q = DMatrix::<f64>::zeros(n, n);
            for j in k + 1..=upper {
                let drift = &reversed.drifts()[j];
                let g = reversed.diffusion_at(j);
                let a = g * g.transpose();
                // Extend the chain by the step j -> j - 1.
                xi += &phi * &drift.offset * dt;
                q += &phi * &a * phi.transpose() * dt;
                phi = &phi + &phi * &drift.matrix * dt;
                let q_sym = (&q + q.transpose()) * 0.5;
                let prec = match q_sym.cholesky() {
                    Some(c) => c.inverse(),
                    // The final step is pinned; its drift is never needed.
                    None if j == k + 1 => continue,
                    None => {
                        return Err(Error::UnreachableAnchor {
                            index: slot,
                            time: grid.time(k),
                        })
                    }
                };
                let score = phi.transpose() * prec;
                let residual = z - &xi;
                let whitened = g.transpose() * &score;
                let drift_gain = &a * &score;
                extra[j] = Some((
                    AffineDrift {
                        matrix: -(&drift_gain * &phi),
                        offset: &drift_gain * &residual,
                    },
                    AffineDrift {
                        matrix: -(&whitened * &phi),
                        offset: whitened * residual,
                    },
                ));
            }
        }
        Ok(Self {
            reversed,
            anchors,
            indices,
            target,
            eps_hit,
            extra,
        })
    }

    pub fn reversed(&self) -> &ReversedModel {
        &self.reversed
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Grid indices the anchors snapped to.
    pub fn anchor_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn eps_hit(&self) -> f64 {
        self.eps_hit
    }

    pub fn target_time(&self) -> f64 {
        self.reversed.grid().time(self.target)
    }

    fn index(&self, t: f64) -> Result<usize> {
        let grid = self.reversed.grid();
        let j = grid
            .index_of(t)
            .ok_or_else(|| invalid(format!("t={t} is not a grid point")))?;
        if j <= self.target {
            return Err(invalid(format!("t={t} is not after the backfill target")));
        }
        Ok(j)
    }

    /// Bridged drift at grid time `t` (forward clock), driving the step
    /// from `t` back one grid point.
    pub fn bridge_drift(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let j = self.index(t)?;
        let mut out = self.reversed.drift(j, x)?;
        if let Some((extra, _)) = &self.extra[j] {
            out += extra.eval(x);
        }
        Ok(out)
    }

    /// The h-transform term alone at grid time `t`.
    pub fn guidance_drift(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let j = self.index(t)?;
        Ok(match &self.extra[j] {
            Some((extra, _)) => extra.eval(x),
            None => DVector::zeros(x.len()),
        })
    }
}

/// Free-function form of [`BridgeSpec::bridge_drift`].
pub fn bridge_drift(spec: &BridgeSpec, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    spec.bridge_drift(t, x)
}

/// How the anchor-steering term enters the simulated drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// The h-transform bridge.
    Bridge,
    /// The bridge term scaled by a factor (`> 1` rushes toward anchors).
    Steepened(f64),
}

impl Guidance {
    fn scale(self) -> f64 {
        match self {
            Guidance::Bridge => 1.0,
            Guidance::Steepened(beta) => beta,
        }
    }
}

/// Conditioned paths and per-path diagnostics.
#[derive(Debug, Clone)]
pub struct ConditionedEnsemble {
    pub paths: PathEnsemble,
    /// `hit_errors[k][i]`: max-abs miss of path `k` at anchor `i`.
    pub hit_errors: Vec<Vec<f64>>,
    /// Distance between the unpinned Euler proposal and each anchor.
    pub pin_jumps: Vec<Vec<f64>>,
    /// Girsanov relative entropy of each path against the reversed model.
    pub kl: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl ConditionedEnsemble {
    pub fn max_hit_error(&self) -> f64 {
        self.hit_errors
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn mean_kl(&self) -> f64 {
        self.kl.iter().sum::<f64>() / self.kl.len() as f64
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|a| **a).count()
    }
}

/// Simulate bridged paths from the end of the reversed grid to the target.
pub fn simulate_conditioned_backfill(
    spec: &BridgeSpec,
    start: &BackfillStart,
    n_paths: usize,
    seed: u64,
) -> Result<ConditionedEnsemble> {
    simulate_guided_backfill(spec, Guidance::Bridge, start, n_paths, seed)
}

/// Like [`simulate_conditioned_backfill`] with a chosen guidance. Every
/// variant pins anchors, so the KL values compare anchor-hitting laws.
pub fn simulate_guided_backfill(
    spec: &BridgeSpec,
    guidance: Guidance,
    start: &BackfillStart,
    n_paths: usize,
    seed: u64,
) -> Result<ConditionedEnsemble> {
    let reversed = &spec.reversed;
    let grid = *reversed.grid();
    let n = reversed.dim();
    let last = grid.n_steps();
    let target = spec.target;
    let starts = StartSampler::new(reversed, start, n_paths)?;
    let sub = grid.subgrid(target, last)?;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let beta = guidance.scale();
    let n_anchors = spec.indices.len();
    let drifts = reversed.drifts();

    let mut paths = PathEnsemble::zeros(sub, n, n_paths);
    let chunks: Vec<&mut [f64]> = paths.path_chunks_mut().collect();
    let diagnostics: Vec<(Vec<f64>, Vec<f64>, f64)> = chunks
        .into_par_iter()
        .enumerate()
        .map(|(k, out)| {
            let mut rng = path_rng(seed, k as u64);
            let mut x = starts.draw(k, &mut rng);
            let at = |i: usize| (i - target) * n..(i - target + 1) * n;
            out[at(last)].copy_from_slice(x.as_slice());
            let mut hits = vec![0.0; n_anchors];
            let mut jumps = vec![0.0; n_anchors];
            let mut kl = 0.0;
            let mut drift = DVector::zeros(n);
            let mut guide = DVector::zeros(n);
            let mut white = DVector::zeros(reversed.diffusion_at(last).ncols());
            let mut w = DVector::zeros(reversed.diffusion_at(last).ncols());
            let mut slot = n_anchors;
            for j in (target + 1..=last).rev() {
                drifts[j].eval_into(&x, &mut drift);
                if let Some((extra, whitened)) = &spec.extra[j] {
                    extra.eval_into(&x, &mut guide);
                    drift.axpy(beta, &guide, 1.0);
                    whitened.eval_into(&x, &mut white);
                    kl += 0.5 * beta * beta * white.norm_squared() * dt;
                }
                x.axpy(dt, &drift, 1.0);
                fill_normal(&mut rng, sqrt_dt, &mut w);
                x.gemv(1.0, reversed.diffusion_at(j), &w, 1.0);
                if slot > 0 && spec.indices[slot - 1] == j - 1 {
                    slot -= 1;
                    let z = &spec.anchors.anchors[slot].1;
                    jumps[slot] = (&x - z).amax();
                    x.copy_from(z);
                    hits[slot] = (&x - z).amax();
                }
                out[at(j - 1)].copy_from_slice(x.as_slice());
            }
            (hits, jumps, kl)
        })
        .collect();

    let mut hit_errors = Vec::with_capacity(n_paths);
    let mut pin_jumps = Vec::with_capacity(n_paths);
    let mut kl = Vec::with_capacity(n_paths);
    let mut accepted = Vec::with_capacity(n_paths);
    for (h, j, k) in diagnostics {
        accepted.push(h.iter().all(|e| *e <= spec.eps_hit));
        hit_errors.push(h);
        pin_jumps.push(j);
        kl.push(k);
    }
    Ok(ConditionedEnsemble {
        paths,
        hit_errors,
        pin_jumps,
        kl,
        accepted,
    })
}

/// Linear-correction relaxation of a base path through the anchors.
///
/// On each anchor interval `[t_i, t_{i+1}]` the path becomes
/// `b + [(Y_i - b(t_i)) (t_{i+1} - t) + (Y_{i+1} - b(t_{i+1})) (t - t_i)] / (t_{i+1} - t_i)`;
/// outside the anchor hull it is `b`. Anchors snap to the nearest grid time
/// and are reproduced exactly.
pub fn interpolation_relaxation(base: &PathSample, anchors: &AnchorSet) -> Result<PathSample> {
    let grid = base.grid;
    if anchors.iter().any(|(_, v)| v.len() != base.dim()) {
        return Err(invalid("anchor dimension does not match the base path"));
    }
    let tol = 1e-9 * grid.dt();
    if anchors
        .iter()
        .any(|(t, _)| *t < grid.t_start() - tol || *t > grid.t_end() + tol)
    {
        return Err(invalid("anchor outside the base path grid"));
    }
    let indices = anchors.snapped(&grid, |t| Some(grid.nearest_index(t)))?;
    let mut values = base.values.clone();
    let ys: Vec<&DVector<f64>> = anchors.iter().map(|(_, v)| v).collect();
    for s in 0..indices.len().saturating_sub(1) {
        let (i0, i1) = (indices[s], indices[s + 1]);
        let (t0, t1) = (grid.time(i0), grid.time(i1));
        let c0 = ys[s] - &base.values[i0];
        let c1 = ys[s + 1] - &base.values[i1];
        for i in i0 + 1..i1 {
            let t = grid.time(i);
            values[i] = &base.values[i] + (&c0 * (t1 - t) + &c1 * (t - t0)) / (t1 - t0);
        }
    }
    for (&i, y) in indices.iter().zip(ys) {
        values[i] = y.clone();
    }
    PathSample::new(grid, values)
}

/// Girsanov relative entropy estimate along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    /// Steps skipped because the diffusion covariance was not invertible.
    pub excluded_steps: Vec<usize>,
}

/// `1/2 sum (db)' a^-1 (db) dt` with `db` the drift difference and
/// `a = G G'` at each step.
pub fn girsanov_kl(
    conditioned: &[DVector<f64>],
    base: &[DVector<f64>],
    diffusions: &[DMatrix<f64>],
    dt: f64,
) -> Result<KlEstimate> {
    if conditioned.len() != base.len() || base.len() != diffusions.len() {
        return Err(invalid("drift and diffusion sequences must have equal length"));
    }
    let mut value = 0.0;
    let mut excluded_steps = Vec::new();
    for (i, ((c, b), g)) in conditioned.iter().zip(base).zip(diffusions).enumerate() {
        let diff = c - b;
        if diff.iter().all(|v| *v == 0.0) {
            continue;
        }
        match (g * g.transpose()).cholesky() {
            Some(chol) => value += 0.5 * diff.dot(&chol.solve(&diff)) * dt,
            None => excluded_steps.push(i),
        }
    }
    Ok(KlEstimate {
        value,
        excluded_steps,
    })
}
