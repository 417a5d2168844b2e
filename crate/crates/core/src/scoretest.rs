//! Generalized score test of a genetic effect at the restricted (null) sieve
//! MLE, and a batch runner that reuses one null fit across many SNPs.
//!
//! At `β_g = 0` the augmented likelihood, as a function of the null
//! parameters, is the null likelihood itself. The null block of the
//! observed information is therefore taken from the null fit and only the
//! rows involving `β_g` are differenced per SNP.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_joint, invert_information, FitConfig, FitResult};
use crate::likelihood::{Coords, Dataset, ParamLayout, Part, PreparedData};
use crate::numdiff::{gradient, hessian_rows};
use crate::par::{self, Execution};

/// Whether the tested covariate has one coefficient shared by both
/// margins (df = 1) or one per margin (df = 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneticEffect {
    #[default]
    Shared,
    MarginSpecific,
}

impl GeneticEffect {
    pub fn df(self) -> usize {
        match self {
            GeneticEffect::Shared => 1,
            GeneticEffect::MarginSpecific => 2,
        }
    }
}

/// A converged fit without the tested covariate, bound to its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullFit {
    pub fit: FitResult,
    pub config: FitConfig,
}

impl NullFit {
    pub fn fit(data: &Dataset, config: &FitConfig) -> Result<Self> {
        Self::from_fit(fit_joint(data, config)?, config.clone())
    }

    pub fn from_fit(fit: FitResult, config: FitConfig) -> Result<Self> {
        if !fit.converged {
            return Err(Error::Convergence(format!(
                "null fit did not converge (gradient norm {:.3e})",
                fit.grad_norm
            )));
        }
        Ok(Self { fit, config })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fit.data_fingerprint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTestResult {
    pub snp: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Largest absolute score component of the null parameters at the
    /// augmented point; near zero when the null optimum is interior (α
    /// held at 1 leaves a nonzero α score).
    pub max_nuisance_score: f64,
}

/// Per-SNP failure in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpError {
    pub snp: String,
    pub reason: String,
}

/// Upper-tail probability of the chi-square distribution.
pub fn chisq_sf(x: f64, df: usize) -> Result<f64> {
    if !(x >= 0.0) || df == 0 {
        return Err(Error::Domain(format!("chi-square tail needs x >= 0 and df >= 1, got x = {x}, df = {df}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0))
}

/// Dataset with the genotype column appended to both margins.
fn augment(data: &Dataset, g: &[f64], name: &str) -> Result<Dataset> {
    if g.len() != data.len() {
        return Err(Error::LayoutMismatch(format!(
            "genotype column has {} values for {} records",
            g.len(),
            data.len()
        )));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidRecord { id: data.records[i].id.clone(), reason: "non-finite genotype".into() });
    }
    let mut records = data.records.clone();
    for (rec, &v) in records.iter_mut().zip(g) {
        for m in rec.margins.iter_mut().flatten() {
            m.z.push(v);
        }
    }
    let mut names = data.covariate_names.clone();
    for n in names.iter_mut() {
        n.push(format!("zs_{name}"));
    }
    Ok(Dataset { records, covariate_names: names, t_hi: data.t_hi })
}

/// Score test of one covariate column `g` (one value per record, entering
/// both margins).
pub fn score_test(
    data: &Dataset,
    null: &NullFit,
    g: &[f64],
    name: &str,
    effect: GeneticEffect,
) -> Result<ScoreTestResult> {
    if data.fingerprint() != null.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    score_test_unchecked(data, null, g, name, effect)
}

fn score_test_unchecked(
    data: &Dataset,
    null: &NullFit,
    g: &[f64],
    name: &str,
    effect: GeneticEffect,
) -> Result<ScoreTestResult> {
    let old: &ParamLayout = &null.fit.params.layout;
    let (layout, g_slots) = old.with_extra_covariate(name, effect == GeneticEffect::Shared);
    let d = g_slots.len();
    let nb = old.n_beta();
    let remap = |i: usize| if i < nb { i } else { i + d };

    let aug = augment(data, g, name)?;
    let prep = PreparedData::centered(&aug, &layout, null.config.execution)?;
    let mut x = vec![0.0; layout.len()];
    for (i, v) in null.fit.params.values.iter().enumerate() {
        x[remap(i)] = *v;
    }
    let nat = layout.to_natural(&prep.to_internal(&x));
    let f = |y: &[f64]| prep.loglik(y, Coords::Natural, Part::Joint);
    let diff = &null.config.info_diff;

    let score = gradient(&f, &nat, diff)?;
    let max_nuisance_score = (0..layout.len())
        .filter(|i| !g_slots.contains(i))
        .map(|i| score[i].abs())
        .fold(0.0, f64::max);
    let u: Vec<f64> = g_slots.iter().map(|&i| score[i]).collect();
    if u.iter().all(|&v| v == 0.0) {
        return Ok(ScoreTestResult { snp: name.into(), statistic: 0.0, df: d, p_value: 1.0, max_nuisance_score });
    }

    let null_info = null.fit.observed_information.to_dmatrix();
    let n = layout.len();
    let mut info = DMatrix::zeros(n, n);
    for i in 0..old.len() {
        for j in 0..old.len() {
            info[(remap(i), remap(j))] = null_info[(i, j)];
        }
    }
    let rows = -hessian_rows(&f, &nat, &g_slots, diff)?;
    for (k, &gi) in g_slots.iter().enumerate() {
        for j in 0..n {
            info[(gi, j)] = rows[(k, j)];
            info[(j, gi)] = rows[(k, j)];
        }
    }
    let inv = invert_information(&info)?.inverse;
    let mut t = 0.0;
    for (a, &ga) in g_slots.iter().enumerate() {
        for (b, &gb) in g_slots.iter().enumerate() {
            t += u[a] * inv[(ga, gb)] * u[b];
        }
    }
    let statistic = t.max(0.0);
    Ok(ScoreTestResult { snp: name.into(), statistic, df: d, p_value: chisq_sf(statistic, d)?, max_nuisance_score })
}

/// Genotype dosages: one column per SNP, rows aligned with the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeMatrix {
    pub snps: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

/// Scores every SNP against one null fit. Results are in input order and
/// each SNP's failure is reported without stopping the batch.
pub fn batch_score_test(
    data: &Dataset,
    null: &NullFit,
    genotypes: &GenotypeMatrix,
    effect: GeneticEffect,
    execution: Execution,
) -> Result<Vec<std::result::Result<ScoreTestResult, SnpError>>> {
    if data.fingerprint() != null.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    if genotypes.snps.len() != genotypes.columns.len() {
        return Err(Error::LayoutMismatch("genotype names and columns differ in number".into()));
    }
    let idx: Vec<usize> = (0..genotypes.snps.len()).collect();
    Ok(par::map(execution, &idx, |&k| {
        let snp = &genotypes.snps[k];
        score_test_unchecked(data, null, &genotypes.columns[k], snp, effect)
            .map_err(|e| SnpError { snp: snp.clone(), reason: e.to_string() })
    }))
}
