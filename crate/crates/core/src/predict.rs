//! Joint and conditional survival from a fitted model.

use serde::{Deserialize, Serialize};

use crate::copula::{copula_cdf, CopulaParams};
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::likelihood::decode_params;
use crate::margins::{marginal_survival, MarginModel};

/// Decoded margins and copula of a fit, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub margins: [MarginModel; 2],
    pub copula: CopulaParams,
}

impl FittedModel {
    pub fn new(fit: &FitResult) -> Result<Self> {
        let (margins, copula) = decode_params(&fit.params)?;
        Ok(Self { margins, copula })
    }

    pub fn marginal(&self, j: usize, t: f64, z: &[f64]) -> Result<f64> {
        marginal_survival(&self.margins[j], t, z)
    }

    /// `P(T1 > t1, T2 > t2 | z1, z2) = C(S1(t1|z1), S2(t2|z2))`.
    pub fn joint(&self, t1: f64, t2: f64, z1: &[f64], z2: &[f64]) -> Result<f64> {
        copula_cdf(self.marginal(0, t1, z1)?, self.marginal(1, t2, z2)?, &self.copula)
    }

    /// `P(T2 > t + s | T2 > t, T1 ≤ t)`: the chance that margin 2 stays
    /// event-free for `s` more time units given that margin 1 has had its
    /// event by `t` and margin 2 has not.
    pub fn conditional_given_fellow(&self, s: f64, t: f64, z1: &[f64], z2: &[f64]) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("additional time {s} must be >= 0")));
        }
        let u = self.marginal(0, t, z1)?;
        let v0 = self.marginal(1, t, z2)?;
        let v1 = self.marginal(1, t + s, z2)?;
        let den = v0 - copula_cdf(u, v0, &self.copula)?;
        if den < 1e-12 {
            return Err(Error::DegenerateConditioning(den));
        }
        if s == 0.0 {
            return Ok(1.0);
        }
        let num = v1 - copula_cdf(u, v1, &self.copula)?;
        Ok((num / den).clamp(0.0, 1.0))
    }
}

pub fn joint_survival(fit: &FitResult, t1: f64, t2: f64, z1: &[f64], z2: &[f64]) -> Result<f64> {
    FittedModel::new(fit)?.joint(t1, t2, z1, z2)
}

pub fn conditional_survival_given_fellow_progressed(
    fit: &FitResult,
    s: f64,
    t_cond: f64,
    z1: &[f64],
    z2: &[f64],
) -> Result<f64> {
    FittedModel::new(fit)?.conditional_given_fellow(s, t_cond, z1, z2)
}

/// Joint survival on a rectangular time grid; `values[i][j]` is at
/// `(t1[i], t2[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Evaluates the joint survival surface. Times outside the sieve range are
/// refused rather than extrapolated.
pub fn survival_grid(fit: &FitResult, t1: &[f64], t2: &[f64], z1: &[f64], z2: &[f64]) -> Result<PredictionGrid> {
    let model = FittedModel::new(fit)?;
    let s1 = t1.iter().map(|&t| model.marginal(0, t, z1)).collect::<Result<Vec<_>>>()?;
    let s2 = t2.iter().map(|&t| model.marginal(1, t, z2)).collect::<Result<Vec<_>>>()?;
    let values = s1
        .iter()
        .map(|&u| s2.iter().map(|&v| copula_cdf(u, v, &model.copula)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionGrid { t1: t1.to_vec(), t2: t2.to_vec(), z1: z1.to_vec(), z2: z2.to_vec(), values })
}
