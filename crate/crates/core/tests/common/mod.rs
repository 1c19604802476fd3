//! Independent oracles shared by the integration and acceptance suites.
//! Nothing in this file calls into the filter, reversal or conditioning code
//! paths it is used to check; `marginals` runs the library against
//! independently simulated forward ensembles.
#![allow(dead_code)]

pub mod bridges;
pub mod kalman;
pub mod marginals;
pub mod relaxation;
pub mod tracking;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random stable 2-D model `(A, C, H, K)` with `p = 2` observations.
pub struct RandomModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub x0: DVector<f64>,
}

pub fn random_stable_model(seed: u64) -> RandomModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let m = DMatrix::from_fn(2, 2, |_, _| u(-1.0, 1.0));
    // Shift so every eigenvalue has real part in [-1.5, -0.5].
    let abscissa = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = abscissa + u(0.5, 1.5);
    let a = m - DMatrix::identity(2, 2) * shift;
    let c = DMatrix::from_fn(2, 2, |_, _| u(-1.0, 1.0));
    let h = DMatrix::identity(2, 2) + DMatrix::from_fn(2, 2, |_, _| u(-0.5, 0.5));
    let k = DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| u(0.5, 1.5)));
    let x0 = DVector::from_fn(2, |_, _| u(-2.0, 2.0));
    RandomModel { a, c, h, k, x0 }
}

/// Discrete-time Kalman filter on the Euler discretization: measurement
/// update with `dY ~ N(H dt x, K K' dt)`, then prediction with
/// `F = I + A dt`, `Q = C C' dt`. Returns the filtered means and
/// covariances at every grid time.
pub fn discrete_kalman(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    dy: &[DVector<f64>],
    dt: f64,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n = x0.len();
    let f = DMatrix::identity(n, n) + a * dt;
    let q = c * c.transpose() * dt;
    let r = k * k.transpose() * dt;
    let hd = h * dt;
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut xs = vec![x.clone()];
    let mut ps = vec![p.clone()];
    for z in dy {
        let s = &hd * &p * hd.transpose() + &r;
        let gain = &p * hd.transpose() * s.try_inverse().unwrap();
        x = &x + &gain * (z - &hd * &x);
        p = (DMatrix::identity(n, n) - &gain * &hd) * &p;
        x = &f * &x;
        p = &f * &p * f.transpose() + &q;
        xs.push(x.clone());
        ps.push(p.clone());
    }
    (xs, ps)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Standard error of the sample variance for a sample with this spread
/// (fourth-moment estimate).
pub fn var_std_err(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (m, v) = mean_var(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - v * v) / n).sqrt()
}

/// Exact Riccati solution through the Hamiltonian flow: with
/// `[X; Y]' = [[A, Q], [S, -A']] [X; Y]`, `X(0) = P0`, `Y(0) = I`,
/// the covariance is `P(t) = X(t) Y(t)^{-1}` (`Q = C C'`, `S = H'(KK')^{-1}H`).
/// Propagated one step at a time with the exact step exponential.
pub fn riccati_hamiltonian(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    dt: f64,
    n_steps: usize,
) -> Vec<DMatrix<f64>> {
    let n = a.nrows();
    let q = c * c.transpose();
    let s = h.transpose() * (k * k.transpose()).try_inverse().unwrap() * h;
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&q);
    ham.view_mut((n, 0), (n, n)).copy_from(&s);
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let step = (ham * dt).exp();
    let mut out = vec![p0.clone()];
    let mut p = p0.clone();
    for _ in 0..n_steps {
        // Restart from [P; I] each step to keep the flow well-conditioned.
        let mut xy = DMatrix::zeros(2 * n, n);
        xy.view_mut((0, 0), (n, n)).copy_from(&p);
        xy.view_mut((n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let next = &step * xy;
        let x = next.view((0, 0), (n, n)).into_owned();
        let y = next.view((n, 0), (n, n)).into_owned();
        p = x * y.try_inverse().unwrap();
        p = (&p + p.transpose()) * 0.5;
        out.push(p.clone());
    }
    out
}

