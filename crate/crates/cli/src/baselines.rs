//! Deterministic fills used as baselines.

use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Every value equals the last tick before the dense window, or the first
/// dense value when there are no ticks.
pub fn flat_fill(ticks: &[(f64, f64)], first_dense: f64, times: &[f64]) -> Vec<f64> {
    let level = ticks.last().map_or(first_dense, |t| t.1);
    vec![level; times.len()]
}

/// Piecewise-linear interpolation through `points` (sorted by time), held
/// flat outside their range.
pub fn linear_fill(points: &[(f64, f64)], times: &[f64]) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            let Some(first) = points.first() else {
                return f64::NAN;
            };
            let last = points.last().unwrap();
            if t <= first.0 {
                return first.1;
            }
            if t >= last.0 {
                return last.1;
            }
            let k = points.partition_point(|p| p.0 <= t);
            let (t0, y0) = points[k - 1];
            let (t1, y1) = points[k];
            y0 + (y1 - y0) * (t - t0) / (t1 - t0)
        })
        .collect()
}

/// Least-squares polynomial of degree `min(degree, points - 1)` through
/// `points`, evaluated at `times`. Time is rescaled to the points' span.
pub fn polynomial_fill(points: &[(f64, f64)], degree: usize, times: &[f64]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(CliError::Invalid("polynomial fill needs at least one point".into()));
    }
    let d = degree.min(points.len() - 1);
    let lo = points.first().unwrap().0;
    let span = (points.last().unwrap().0 - lo).max(f64::MIN_POSITIVE);
    let scale = |t: f64| (t - lo) / span;
    let design = DMatrix::from_fn(points.len(), d + 1, |i, j| scale(points[i].0).powi(j as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let coef = design
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| CliError::Invalid(format!("polynomial fit failed: {e}")))?;
    Ok(times
        .iter()
        .map(|&t| {
            let s = scale(t);
            coef.iter().rev().fold(0.0, |acc, c| acc * s + c)
        })
        .collect())
}
