//! BFGS minimization with numerical gradients and a safeguarded
//! cubic-interpolation backtracking line search.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numdiff::{gradient_subset, hessian, DiffConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Bound on the gradient max-norm at convergence.
    pub grad_tol: f64,
    /// Bound on the relative objective change over the last step.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Largest allowed change of any coordinate in a single step.
    pub max_step: f64,
    pub diff: DiffConfig,
    /// Seed the inverse-Hessian approximation with a finite-difference
    /// Hessian at the start, when it is positive definite.
    pub initial_hessian: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            max_iter: 500,
            max_step: 2.0,
            diff: DiffConfig { rel_step: 5e-4, levels: 2, ..DiffConfig::default() },
            initial_hessian: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const NOISE: f64 = 1e-13;

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f` over the coordinates `free`, holding the rest of `x0` fixed.
/// Non-finite objective values are treated as infeasible by the line search.
pub fn minimize<F>(f: &F, x0: &[f64], free: &[usize], cfg: &OptimConfig) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = free.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(crate::Error::Convergence("objective not finite at the starting point".into()));
    }
    let grad = |x: &[f64]| -> Result<DVector<f64>> { Ok(DVector::from_vec(gradient_subset(f, x, free, &cfg.diff)?)) };
    let mut g = grad(&x)?;
    let seed = |x: &[f64]| {
        cfg.initial_hessian
            .then(|| start_inverse_hessian(f, x, free, &cfg.diff))
            .flatten()
            .map_or((DMatrix::<f64>::identity(n, n), true), |h| (h, false))
    };
    let (mut hinv, mut fresh) = seed(&x);
    // The quasi-Newton update degrades along flat directions (sieve
    // increments drifting to zero, α held at its cap); a long run is
    // re-seeded from the local curvature.
    let reseed_every = (3 * n).max(30);
    let mut since_seed = 0;
    let mut last_rel = 0.0;
    let mut iterations = 0;
    let done = |g: &DVector<f64>, rel: f64| max_norm(g) <= cfg.grad_tol && rel <= cfg.rel_tol;

    while iterations < cfg.max_iter && !done(&g, last_rel) {
        iterations += 1;
        since_seed += 1;
        if since_seed > reseed_every {
            (hinv, fresh) = seed(&x);
            since_seed = 0;
        }
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
            fresh = true;
        }
        let dmax = max_norm(&d);
        let mut t = if dmax > cfg.max_step { cfg.max_step / dmax } else { 1.0 };
        if fresh {
            // Unscaled steepest descent: start with a step of moderate length.
            t = t.min(1.0 / dmax.max(1.0));
        }
        let step_to = |t: f64| {
            let mut y = x.clone();
            for (k, &i) in free.iter().enumerate() {
                y[i] += t * d[k];
            }
            y
        };
        // Below this scale objective differences are rounding noise; a step
        // whose predicted decrease is that small is accepted unless it
        // raises the objective by more than the noise.
        let noise = NOISE * fx.abs().max(1.0);
        let mut accepted = None;
        let (mut t_prev, mut f_prev) = (0.0, fx);
        for _ in 0..60 {
            let y = step_to(t);
            let fy = f(&y);
            let armijo = fy <= fx + 1e-4 * t * slope;
            let in_noise = -slope * t <= noise && fy <= fx + noise;
            if fy.is_finite() && (armijo || in_noise) {
                accepted = Some((y, fy));
                break;
            }
            let next = if fy.is_finite() {
                interpolate(fx, slope, t, fy, t_prev, f_prev)
            } else {
                0.25 * t
            };
            t_prev = t;
            f_prev = if fy.is_finite() { fy } else { f64::INFINITY };
            t = next.clamp(0.1 * t, 0.5 * t);
            if t * dmax < 1e-16 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
        }
        let Some((y, fy)) = accepted else {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let gy = grad(&y)?;
        let s = DVector::from_iterator(n, free.iter().map(|&i| y[i] - x[i]));
        let yv = &gy - &g;
        let sy = s.dot(&yv);
        last_rel = (fx - fy).abs() / fx.abs().max(1.0);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                hinv *= sy / yv.dot(&yv);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        x = y;
        fx = fy;
        g = gy;
    }
    Ok(OptimResult { grad_norm: max_norm(&g), converged: done(&g, last_rel), x, fx, iterations })
}

fn start_inverse_hessian<F>(f: &F, x: &[f64], free: &[usize], diff: &DiffConfig) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let sub: Vec<f64> = free.iter().map(|&i| x[i]).collect();
    let restricted = |s: &[f64]| {
        let mut y = x.to_vec();
        for (k, &i) in free.iter().enumerate() {
            y[i] = s[k];
        }
        f(&y)
    };
    let h = hessian(&restricted, &sub, diff).ok()?;
    // Absolute eigenvalues with a relative floor: a descent metric even where
    // the objective is locally non-convex or flat.
    let eig = SymmetricEigen::new(h);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(top > 0.0 && top.is_finite()) {
        return None;
    }
    let d = eig.eigenvalues.map(|v| 1.0 / v.abs().max(1e-4 * top));
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Minimizer of the cubic (or quadratic, with one prior point) model of the
/// objective along the search direction.
fn interpolate(f0: f64, slope: f64, t: f64, ft: f64, t_prev: f64, f_prev: f64) -> f64 {
    if t_prev == 0.0 || !f_prev.is_finite() {
        return -slope * t * t / (2.0 * (ft - f0 - slope * t));
    }
    let r1 = ft - f0 - slope * t;
    let r2 = f_prev - f0 - slope * t_prev;
    let den = t - t_prev;
    let a = (r1 / (t * t) - r2 / (t_prev * t_prev)) / den;
    let b = (-t_prev * r1 / (t * t) + t * r2 / (t_prev * t_prev)) / den;
    if a.abs() < 1e-300 {
        return -slope / (2.0 * b);
    }
    let disc = b * b - 3.0 * a * slope;
    if disc < 0.0 {
        return 0.5 * t;
    }
    (-b + disc.sqrt()) / (3.0 * a)
}
