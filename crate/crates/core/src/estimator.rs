//! Two-step sieve maximum likelihood: marginal fits, dependence fit with
//! margins held fixed, then a joint fit from that warm start. Standard errors
//! come from inverting the observed information of all parameters.

use std::cell::Cell;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::copula::CopulaParams;
use crate::error::{Error, Result};
use crate::likelihood::{
    logit_from_alpha, Coords, Dataset, ParamLayout, ParamVector, Part, PreparedData, TieMode, ALPHA_BOUNDARY,
};
use crate::margins::{MarginModel, TransformSpec};
use crate::numdiff::{hessian, DiffConfig};
use crate::optim::{minimize, OptimConfig};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub degree: usize,
    pub transforms: [TransformSpec; 2],
    pub tie: TieMode,
    pub optim: OptimConfig,
    /// Differencing used for the observed information.
    pub info_diff: DiffConfig,
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            transforms: [TransformSpec::PO, TransformSpec::PO],
            tie: TieMode::None,
            optim: OptimConfig::default(),
            info_diff: DiffConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::Config("degree must be at least 1".into()));
        }
        if !(self.optim.grad_tol > 0.0 && self.optim.rel_tol > 0.0) || self.optim.max_iter == 0 {
            return Err(Error::Config("optimizer tolerances must be positive".into()));
        }
        self.optim.diff.validate()?;
        self.info_diff.validate()?;
        for t in &self.transforms {
            t.validate()?;
        }
        Ok(())
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self.optim.diff.execution = execution;
        self.info_diff.execution = execution;
        self
    }

    pub fn layout(&self, data: &Dataset) -> Result<ParamLayout> {
        ParamLayout::new(&data.covariate_names, self.transforms, self.degree, self.tie, data.t_hi)
    }
}

/// Dense matrix in row-major order with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl From<&DMatrix<f64>> for Matrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Estimates in working coordinates, with their layout.
    pub params: ParamVector,
    pub loglik: f64,
    pub aic: f64,
    pub n_free: usize,
    /// Negative Hessian of the log-likelihood in natural coordinates
    /// (α, κ, r natural; sieve on the log-increment scale of the
    /// covariate-centered parameterization).
    pub observed_information: Matrix,
    /// Covariance block of the finite-dimensional parameters.
    pub vcov_finite: Matrix,
    pub finite_names: Vec<String>,
    pub finite_estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub tau: f64,
    pub tau_se: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub alpha_at_boundary: bool,
    pub condition_number: f64,
    pub ridge_applied: bool,
    /// Step-1 estimates (marginal fits plus dependence fit).
    pub step1_estimates: ParamVector,
    /// Joint log-likelihood at the step-1 estimates.
    pub step1_loglik: f64,
    pub data_fingerprint: String,
}

impl FitResult {
    pub fn copula(&self) -> CopulaParams {
        self.params.copula()
    }

    /// Estimate and standard error of a finite-dimensional parameter by name.
    pub fn estimate(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.finite_names.iter().position(|n| n == name)?;
        Some((self.finite_estimates[i], self.std_errors[i]))
    }
}

/// Marginal fit of one margin.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginFit {
    pub model: MarginModel,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

thread_local! {
    static FIT_COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Number of joint fits run on the current thread.
pub fn fit_count() -> usize {
    FIT_COUNT.with(|c| c.get())
}

pub fn aic(fit: &FitResult) -> f64 {
    2.0 * fit.n_free as f64 - 2.0 * fit.loglik
}

/// Default starting point: zero coefficients, a linear cumulative hazard
/// reaching 1 at the upper end of the range, Clayton-like dependence.
pub fn initial_params(layout: &ParamLayout) -> ParamVector {
    let mut x = vec![0.0; layout.len()];
    x[layout.alpha_index()] = logit_from_alpha(0.9);
    x[layout.kappa_index()] = 1.0f64.ln();
    let xi = (1.0 / (layout.degree + 1) as f64).ln();
    for j in 0..2 {
        for i in layout.sieve_range(j) {
            x[i] = xi;
        }
    }
    for j in 0..2 {
        if let Some(i) = layout.r_index(j) {
            x[i] = layout.transforms[j].r.ln();
        }
    }
    ParamVector { layout: layout.clone(), values: x }
}

fn has_information(data: &Dataset, j: usize) -> bool {
    data.records
        .iter()
        .filter_map(|r| r.margins[j].as_ref())
        .any(|m| m.l > 0.0 || m.r.is_finite())
}

fn maximize(
    prep: &PreparedData,
    start: &[f64],
    free: &[usize],
    part: Part,
    optim: &OptimConfig,
) -> Result<crate::optim::OptimResult> {
    let f = |x: &[f64]| -prep.loglik(x, Coords::Working, part);
    minimize(&f, start, free, optim)
}

/// Step 1(a) for one margin: maximizes its marginal sieve likelihood.
pub fn fit_margin(data: &Dataset, j: usize, cfg: &FitConfig) -> Result<MarginFit> {
    cfg.validate()?;
    if !has_information(data, j) {
        return Err(Error::DegenerateData(format!("margin {} has no informative intervals", j + 1)));
    }
    let layout = cfg.layout(data)?;
    let prep = PreparedData::centered(data, &layout, cfg.execution)?;
    let start = initial_params(&layout);
    let r = maximize(&prep, &start.values, &layout.margin_indices(j), Part::Margin(j), &cfg.optim)?;
    let values = prep.to_external(&r.x);
    let (models, _) = crate::likelihood::decode_params(&ParamVector { layout, values })?;
    let [m0, m1] = models;
    Ok(MarginFit {
        model: if j == 0 { m0 } else { m1 },
        loglik: -r.fx,
        converged: r.converged,
        iterations: r.iterations,
    })
}

/// Step 1(a): marginal estimates for both margins. Margins are fitted
/// separately unless they share parameters, in which case the pooled
/// marginal likelihood is maximized. Vectors are internal to `prep`.
pub fn fit_marginals(prep: &PreparedData, start: &[f64], cfg: &FitConfig) -> Result<(Vec<f64>, bool)> {
    let layout = &prep.layout;
    let mut x = start.to_vec();
    let mut converged = true;
    if layout.n_beta() == layout.beta_index[0].len() + layout.beta_index[1].len() && !layout.sieve_shared {
        for j in 0..2 {
            let r = maximize(prep, &x, &layout.margin_indices(j), Part::Margin(j), &cfg.optim)?;
            converged &= r.converged;
            x = r.x;
        }
    } else {
        let r = maximize(prep, &x, &layout.marginal_indices(), Part::Marginal, &cfg.optim)?;
        converged = r.converged;
        x = r.x;
    }
    Ok((x, converged))
}

/// Step 1(b): maximizes the joint likelihood over (α, κ) with the margins
/// held at their step-1(a) values. A coarse scan over τ picks the start.
pub fn fit_dependence(prep: &PreparedData, margins: &[f64], cfg: &FitConfig) -> Result<(Vec<f64>, bool)> {
    let layout = &prep.layout;
    let (ai, ki) = (layout.alpha_index(), layout.kappa_index());
    let mut best = margins.to_vec();
    let mut best_ll = f64::NEG_INFINITY;
    for &alpha in &[0.5, 0.9, 1.0] {
        for &tau in &[0.05, 0.2, 0.4, 0.6, 0.8] {
            let Ok(kappa) = crate::copula::solve_kappa_for_tau(alpha, tau) else { continue };
            let mut x = margins.to_vec();
            x[ai] = logit_from_alpha(alpha).min(30.0);
            x[ki] = kappa.ln();
            let ll = prep.loglik(&x, Coords::Working, Part::Joint);
            if ll > best_ll {
                best_ll = ll;
                best = x;
            }
        }
    }
    let r = maximize(prep, &best, &[ai, ki], Part::Joint, &cfg.optim)?;
    Ok((r.x, r.converged))
}

/// Two-step fit (step 1(a), 1(b), then the joint step 2).
pub fn fit_joint(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let layout = cfg.layout(data)?;
    fit_layout(data, &layout, cfg)
}

/// Two-step fit with an explicit layout.
pub fn fit_layout(data: &Dataset, layout: &ParamLayout, cfg: &FitConfig) -> Result<FitResult> {
    for j in 0..2 {
        if !has_information(data, j) {
            return Err(Error::DegenerateData(format!("margin {} has no informative intervals", j + 1)));
        }
    }
    let prep = PreparedData::centered(data, layout, cfg.execution)?;
    let start = initial_params(layout);
    let (margins, _) = fit_marginals(&prep, &start.values, cfg)?;
    let (step1, _) = fit_dependence(&prep, &margins, cfg)?;
    finish(data, &prep, step1, cfg)
}

/// Joint maximization directly from the default start, without step 1.
pub fn fit_one_step(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let layout = cfg.layout(data)?;
    let prep = PreparedData::centered(data, &layout, cfg.execution)?;
    let start = initial_params(&layout);
    finish(data, &prep, start.values, cfg)
}

/// Joint maximization from a given warm start.
pub fn fit_from(data: &Dataset, start: ParamVector, cfg: &FitConfig) -> Result<FitResult> {
    let prep = PreparedData::centered(data, &start.layout, cfg.execution)?;
    let inner = prep.to_internal(&start.values);
    finish(data, &prep, inner, cfg)
}

/// Step 2 from an internal start vector.
fn finish(data: &Dataset, prep: &PreparedData, start: Vec<f64>, cfg: &FitConfig) -> Result<FitResult> {
    FIT_COUNT.with(|c| c.set(c.get() + 1));
    let layout = &prep.layout;
    let step1_loglik = prep.checked_loglik(&start, Coords::Working, Part::Joint)?;
    let all: Vec<usize> = (0..layout.len()).collect();
    let r = maximize(prep, &start, &all, Part::Joint, &cfg.optim)?;
    let loglik = prep.checked_loglik(&r.x, Coords::Working, Part::Joint)?;
    let info = internal_information(prep, &r.x, &cfg.info_diff)?;
    let params = ParamVector { layout: layout.clone(), values: prep.to_external(&r.x) };
    let start = ParamVector { layout: layout.clone(), values: prep.to_external(&start) };
    let inv = invert_information(&info)?;
    let finite = layout.finite_indices();
    let nat = layout.to_natural(&params.values);
    let vcov = DMatrix::from_fn(finite.len(), finite.len(), |a, b| inv.inverse[(finite[a], finite[b])]);
    let finite_estimates: Vec<f64> = finite.iter().map(|&i| nat[i]).collect();
    let std_errors: Vec<f64> = (0..finite.len()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    let copula = params.copula();
    let (tau, tau_se) = tau_with_se(&copula, &vcov, layout.alpha_index(), layout.kappa_index(), &finite);
    let n_free = layout.len();
    Ok(FitResult {
        loglik,
        aic: 2.0 * n_free as f64 - 2.0 * loglik,
        n_free,
        observed_information: Matrix::from(&info),
        vcov_finite: Matrix::from(&vcov),
        finite_names: layout.finite_names(),
        finite_estimates,
        std_errors,
        tau,
        tau_se,
        converged: r.converged,
        iterations: r.iterations,
        grad_norm: r.grad_norm,
        alpha_at_boundary: copula.alpha >= ALPHA_BOUNDARY,
        condition_number: inv.condition,
        ridge_applied: inv.ridge,
        step1_estimates: start,
        step1_loglik,
        data_fingerprint: data.fingerprint(),
        params,
    })
}

/// Delta-method standard error of τ = 1 − 2ακ/(2κ+1).
fn tau_with_se(c: &CopulaParams, vcov: &DMatrix<f64>, ai: usize, ki: usize, finite: &[usize]) -> (f64, f64) {
    let pa = finite.iter().position(|&i| i == ai).unwrap();
    let pk = finite.iter().position(|&i| i == ki).unwrap();
    let d = 2.0 * c.kappa + 1.0;
    let ga = -2.0 * c.kappa / d;
    let gk = -2.0 * c.alpha / (d * d);
    let var = ga * ga * vcov[(pa, pa)] + 2.0 * ga * gk * vcov[(pa, pk)] + gk * gk * vcov[(pk, pk)];
    (c.tau(), var.max(0.0).sqrt())
}

/// Negative Hessian of the joint log-likelihood in natural coordinates,
/// with the sieve in the internal parameterization of `prep`.
pub fn observed_information(prep: &PreparedData, params: &ParamVector, diff: &DiffConfig) -> Result<DMatrix<f64>> {
    internal_information(prep, &prep.to_internal(&params.values), diff)
}

fn internal_information(prep: &PreparedData, working: &[f64], diff: &DiffConfig) -> Result<DMatrix<f64>> {
    let nat = prep.layout.to_natural(working);
    let f = |x: &[f64]| prep.loglik(x, Coords::Natural, Part::Joint);
    Ok(-hessian(&f, &nat, diff)?)
}

pub struct Inverse {
    pub inverse: DMatrix<f64>,
    pub condition: f64,
    pub ridge: bool,
}

const MAX_CONDITION: f64 = 1e14;

/// Inverts a symmetric information matrix through its eigen-decomposition.
/// A ridge of 1e-8·trace/n is added once if the matrix is singular or not
/// positive definite.
pub fn invert_information(info: &DMatrix<f64>) -> Result<Inverse> {
    let n = info.nrows();
    let attempt = |m: &DMatrix<f64>| {
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        (eig, condition)
    };
    let (mut eig, mut condition) = attempt(info);
    let mut ridge = false;
    if !(condition < MAX_CONDITION) {
        let lambda = 1e-8 * info.trace().abs() / n as f64;
        let (e, c) = attempt(&(info + DMatrix::identity(n, n) * lambda));
        if !(c < MAX_CONDITION) {
            return Err(Error::SingularInformation { condition });
        }
        eig = e;
        condition = c;
        ridge = true;
    }
    let dinv = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let mut inverse = &eig.eigenvectors * dinv * eig.eigenvectors.transpose();
    inverse = (&inverse + inverse.transpose()) * 0.5;
    Ok(Inverse { inverse, condition, ridge })
}
