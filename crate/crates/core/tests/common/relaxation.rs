//! Random instances and property checks for interpolation relaxation.

use backfill_core::conditioning::{interpolation_relaxation, AnchorSet};
use backfill_core::sde::{make_uniform_grid, PathSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RelaxationCase {
    pub base: PathSample,
    /// `(grid index, value)`, increasing and distinct.
    pub anchors: Vec<(usize, f64)>,
}

/// Random-walk base path on a random grid with up to six anchors placed
/// off-grid by less than half a step.
pub fn random_case(seed: u64) -> RelaxationCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(10..400);
    let t0 = rng.random_range(-1.0..1.0);
    let span = rng.random_range(0.1..5.0);
    let grid = make_uniform_grid(t0, t0 + span, n).unwrap();
    let scale = rng.random_range(0.01..3.0);
    let mut x: f64 = rng.random_range(-2.0..2.0);
    let values: Vec<f64> = (0..=n)
        .map(|_| {
            x += scale * rng.random_range(-1.0..1.0) * grid.dt().sqrt();
            x
        })
        .collect();
    let base = PathSample::from_scalars(grid, &values).unwrap();
    let k = rng.random_range(1..=6usize.min(n + 1));
    let mut idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..=n)).collect();
    idx.sort_unstable();
    idx.dedup();
    let anchors = idx
        .into_iter()
        .map(|i| (i, rng.random_range(-3.0..3.0)))
        .collect();
    RelaxationCase { base, anchors }
}

impl RelaxationCase {
    fn anchor_set(&self, jitter: f64) -> AnchorSet {
        let grid = self.base.grid;
        let pts: Vec<(f64, f64)> = self
            .anchors
            .iter()
            .map(|(i, v)| {
                let t = grid.time(*i) + jitter * grid.dt();
                (t.clamp(grid.t_start(), grid.t_end()), *v)
            })
            .collect();
        AnchorSet::from_scalars(&pts).unwrap()
    }

    /// Relax with anchors moved off-grid by `jitter` steps (|jitter| < 0.5)
    /// and check exact interpolation, identity outside the anchor hull and
    /// the per-step bound `|dh| <= |db| + |slope of the correction| dt`.
    pub fn check(&self, jitter: f64) -> Result<(), String> {
        let h = interpolation_relaxation(&self.base, &self.anchor_set(jitter))
            .map_err(|e| e.to_string())?;
        let b: Vec<f64> = self.base.component(0);
        let h: Vec<f64> = h.component(0);
        for (i, v) in &self.anchors {
            if h[*i] != *v {
                return Err(format!("anchor at index {i}: {} != {v}", h[*i]));
            }
        }
        let first = self.anchors[0].0;
        let last = self.anchors.last().unwrap().0;
        for i in (0..first).chain(last + 1..b.len()) {
            if h[i] != b[i] {
                return Err(format!("index {i} outside the hull changed"));
            }
        }
        let dt = self.base.grid.dt();
        for w in self.anchors.windows(2) {
            let ((i0, y0), (i1, y1)) = (w[0], w[1]);
            let slope = ((y1 - b[i1]) - (y0 - b[i0])).abs() / ((i1 - i0) as f64 * dt);
            for i in i0..i1 {
                let jump = (h[i + 1] - h[i]).abs();
                let bound = (b[i + 1] - b[i]).abs() + slope * dt;
                if jump > bound * (1.0 + 1e-9) + 1e-12 {
                    return Err(format!("step {i}: jump {jump} above modulus {bound}"));
                }
            }
        }
        Ok(())
    }
}
