//! Richardson-extrapolated finite-difference gradients and Hessians.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffConfig {
    /// Base step relative to `max(1, |x_i|)`.
    pub rel_step: f64,
    /// Number of step sizes in the extrapolation table.
    pub levels: usize,
    /// Ratio between successive step sizes.
    pub shrink: f64,
    /// Optional per-coordinate multipliers of the base step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self { rel_step: 1e-4, levels: 4, shrink: 2.0, scales: None, execution: Execution::default() }
    }
}

impl DiffConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_step > 0.0) || self.levels < 2 || !(self.shrink > 1.0) {
            return Err(Error::Config(format!(
                "invalid difference config: step {}, levels {}, shrink {}",
                self.rel_step, self.levels, self.shrink
            )));
        }
        Ok(())
    }

    fn step(&self, x: &[f64], i: usize) -> f64 {
        let s = self.scales.as_ref().map_or(1.0, |s| s[i]);
        self.rel_step * x[i].abs().max(1.0) * s
    }

    /// Second differences lose twice as many digits, so the Hessian starts
    /// from the square root of the relative step.
    fn hessian_step(&self, x: &[f64], i: usize) -> f64 {
        self.step(x, i) / self.rel_step * self.rel_step.sqrt()
    }
}

/// Extrapolates estimates at steps `h, h/q, h/q², …` whose error expands in
/// even powers of the step.
fn richardson(estimates: &[f64], shrink: f64) -> f64 {
    let mut t = estimates.to_vec();
    let q2 = shrink * shrink;
    let mut factor = 1.0;
    for k in 1..t.len() {
        factor *= q2;
        for i in (k..t.len()).rev() {
            t[i] = t[i] + (t[i] - t[i - 1]) / (factor - 1.0);
        }
    }
    *t.last().unwrap()
}

fn probe<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], moves: &[(usize, f64)], coord: usize) -> Result<f64> {
    let mut y = x.to_vec();
    for &(i, d) in moves {
        y[i] += d;
    }
    let v = f(&y);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteProbe { coord })
    }
}

/// Partial derivative along coordinate `i`.
pub fn partial<F>(f: &F, x: &[f64], i: usize, cfg: &DiffConfig) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut h = cfg.step(x, i);
    let mut est = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let up = probe(f, x, &[(i, h)], i)?;
        let dn = probe(f, x, &[(i, -h)], i)?;
        est.push((up - dn) / (2.0 * h));
        h /= cfg.shrink;
    }
    Ok(richardson(&est, cfg.shrink))
}

/// Gradient of `f` at `x`, one coordinate per task.
pub fn gradient<F>(f: &F, x: &[f64], cfg: &DiffConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    par::map_range(cfg.execution, x.len(), |i| partial(f, x, i, cfg)).into_iter().collect()
}

/// Gradient restricted to the coordinates in `idx`.
pub fn gradient_subset<F>(f: &F, x: &[f64], idx: &[usize], cfg: &DiffConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    par::map(cfg.execution, idx, |&i| partial(f, x, i, cfg)).into_iter().collect()
}

/// Rows `rows` of the Hessian of `f` at `x`, as a `rows.len() × n` matrix.
/// Entries are computed exactly as in [`hessian`], so a bordered matrix
/// assembled from these rows and a previously computed block matches the
/// full Hessian.
pub fn hessian_rows<F>(f: &F, x: &[f64], rows: &[usize], cfg: &DiffConfig) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFiniteProbe { coord: rows.first().copied().unwrap_or(0) });
    }
    let pairs: Vec<(usize, usize)> = rows.iter().flat_map(|&i| (0..n).map(move |j| (i, j))).collect();
    let entries: Vec<Result<f64>> =
        par::map(cfg.execution, &pairs, |&(i, j)| hessian_entry(f, x, f0, i.max(j), i.min(j), cfg));
    let mut h = DMatrix::zeros(rows.len(), n);
    for (k, v) in entries.into_iter().enumerate() {
        h[(k / n, k % n)] = v?;
    }
    Ok(h)
}

fn hessian_entry<F>(f: &F, x: &[f64], f0: f64, i: usize, j: usize, cfg: &DiffConfig) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let (mut hi, mut hj) = (cfg.hessian_step(x, i), cfg.hessian_step(x, j));
    let mut est = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let v = if i == j {
            let up = probe(f, x, &[(i, hi)], i)?;
            let dn = probe(f, x, &[(i, -hi)], i)?;
            (up - 2.0 * f0 + dn) / (hi * hi)
        } else {
            let pp = probe(f, x, &[(i, hi), (j, hj)], i)?;
            let pm = probe(f, x, &[(i, hi), (j, -hj)], i)?;
            let mp = probe(f, x, &[(i, -hi), (j, hj)], i)?;
            let mm = probe(f, x, &[(i, -hi), (j, -hj)], i)?;
            (pp - pm - mp + mm) / (4.0 * hi * hj)
        };
        est.push(v);
        hi /= cfg.shrink;
        hj /= cfg.shrink;
    }
    Ok(richardson(&est, cfg.shrink))
}

/// Hessian of `f` at `x`. Diagonal entries use second central differences,
/// off-diagonal entries four-point cross differences; each entry is computed
/// once and mirrored, so the result is exactly symmetric.
pub fn hessian<F>(f: &F, x: &[f64], cfg: &DiffConfig) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFiniteProbe { coord: 0 });
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let entries: Vec<Result<f64>> = par::map(cfg.execution, &pairs, |&(i, j)| hessian_entry(f, x, f0, i, j, cfg));
    let mut h = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(entries) {
        let v = v?;
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cubic_gradient_exact() {
        let g = gradient(&|x: &[f64]| x[0].powi(3), &[2.0], &DiffConfig::default()).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_zero() {
        let g = gradient(&|_: &[f64]| 7.5, &[1.0, -3.0, 1e3], &DiffConfig::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn quadratic_hessian() {
        let h = hessian(&|x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1], &[0.7, -1.2], &DiffConfig::default()).unwrap();
        let expect = [[2.0, 3.0], [3.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[(i, j)] - expect[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_form_recovers_symmetrized_matrix() {
        let a = [[1.0, 2.0, -0.5], [0.0, 3.0, 1.0], [4.0, -2.0, 0.5]];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * a[i][j] * x[j];
                }
            }
            s
        };
        let h = hessian(&f, &[0.3, -1.0, 2.0], &DiffConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[(i, j)] - (a[i][j] + a[j][i])).abs() < 1e-6);
            }
        }
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn bordered_rows_match_full_hessian() {
        let f = |x: &[f64]| (x[0] * x[1]).sin() + x[2].exp() * x[0] - x[1].powi(3) * x[2];
        let x = [0.4, 1.3, -0.2];
        let cfg = DiffConfig::default();
        let full = hessian(&f, &x, &cfg).unwrap();
        let rows = hessian_rows(&f, &x, &[2, 0], &cfg).unwrap();
        for j in 0..3 {
            assert_eq!(rows[(0, j)], full[(2, j)]);
            assert_eq!(rows[(1, j)], full[(0, j)]);
        }
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { x[0] + x[1] };
        let err = gradient(&f, &[0.0, 1.0], &DiffConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coord: 1 }));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |x: &[f64]| (x[0] * x[1]).sin() + x[2].exp() * x[0];
        let x = [0.4, 1.3, -0.2];
        let mut cfg = DiffConfig::default();
        let a = hessian(&f, &x, &cfg).unwrap();
        cfg.execution = Execution::Sequential;
        let b = hessian(&f, &x, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn polynomial_of_degree_eight_is_exact(c in proptest::collection::vec(-1.0f64..1.0, 9), x in -1.5f64..1.5) {
            let f = |y: &[f64]| c.iter().rev().fold(0.0, |acc, ci| acc * y[0] + ci);
            let d: f64 = c.iter().enumerate().skip(1).map(|(k, ci)| k as f64 * ci * x.powi(k as i32 - 1)).sum();
            let g = gradient(&f, &[x], &DiffConfig::default()).unwrap();
            prop_assert!((g[0] - d).abs() < 1e-7);
        }
    }
}
