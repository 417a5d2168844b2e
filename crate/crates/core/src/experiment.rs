//! Monte Carlo experiments: estimation bias and coverage, score-test size
//! and power, joint-survival accuracy and one-step vs two-step cost.
//!
//! Replicate `r` of every suite is generated from `(seed, r)` alone, so
//! reports do not depend on the worker count.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::copula::FamilyTag;
use crate::error::{Error, Result};
use crate::estimator::{fit_joint, fit_one_step, FitConfig, FitResult};
use crate::likelihood::{Dataset, TieMode};
use crate::margins::TransformSpec;
use crate::par::{self, Execution};
use crate::predict::FittedModel;
use crate::scoretest::{score_test, GeneticEffect, NullFit};
use crate::simulate::{generate_replicate, Baseline, CopulaSpec, SimConfig};

const Z975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Estimation,
    Type1,
    Power,
    Jointsurv,
    Speed,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimation" => Ok(Suite::Estimation),
            "type1" => Ok(Suite::Type1),
            "power" => Ok(Suite::Power),
            "jointsurv" => Ok(Suite::Jointsurv),
            "speed" => Ok(Suite::Speed),
            _ => Err(Error::Config(format!("unknown suite '{s}'"))),
        }
    }
}

/// Scale knobs and the generating scenario of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub replicates: usize,
    pub n: usize,
    pub seed: u64,
    /// Generating copula family (estimation suite; others use Clayton).
    pub family: FamilyTag,
    pub tau: f64,
    pub maf: f64,
    /// Genetic effects for the power suite.
    pub effect_sizes: Vec<f64>,
    /// Test levels for the type1 and power suites.
    pub levels: Vec<f64>,
    pub degree: usize,
    /// Parallelism across replicates; fits inside a replicate run sequentially.
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn new(suite: Suite) -> Self {
        Self {
            suite,
            replicates: match suite {
                Suite::Estimation => 200,
                Suite::Type1 => 1000,
                Suite::Power => 500,
                Suite::Jointsurv | Suite::Speed => 100,
            },
            n: 500,
            seed: 20_240_601,
            family: FamilyTag::Clayton,
            tau: 0.6,
            maf: 0.4,
            effect_sizes: vec![0.1, 0.2, 0.35],
            levels: vec![0.05, 0.01],
            degree: 3,
            execution: Execution::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("levels must lie in (0, 1)".into()));
        }
        if self.suite == Suite::Power && self.effect_sizes.is_empty() {
            return Err(Error::Config("power suite needs at least one effect size".into()));
        }
        Ok(())
    }

    fn sim(&self, family: FamilyTag, baseline: Baseline, beta_g: f64, seed: u64) -> Result<SimConfig> {
        let mut cfg = SimConfig::clayton_po(self.tau, beta_g, self.maf, self.n);
        cfg.copula = CopulaSpec::Tau { family, tau: self.tau, alpha: None };
        cfg.baseline = baseline;
        cfg.seed = seed;
        cfg.with_calibrated_gap()
    }

    fn fit_config(&self, transform: TransformSpec) -> FitConfig {
        FitConfig { degree: self.degree, transforms: [transform; 2], tie: TieMode::All, ..FitConfig::default() }
            .with_execution(Execution::Sequential)
    }
}

/// Outcome flag of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStatus {
    pub replicate: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Empirical standard deviation of the estimates.
    pub se: f64,
    /// Mean estimated standard error.
    pub see: f64,
    /// Share of 95% Wald intervals covering the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub family: FamilyTag,
    pub replicates: usize,
    pub converged: usize,
    pub mean_right_censoring: f64,
    pub params: Vec<ParamSummary>,
    pub status: Vec<ReplicateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: f64,
    pub rejections: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Type1Report {
    pub replicates: usize,
    pub converged: usize,
    pub rates: Vec<LevelRate>,
    /// Kolmogorov–Smirnov distance of the p-values from Uniform(0,1).
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub p_values: Vec<f64>,
    pub status: Vec<ReplicateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub beta_g: f64,
    pub replicates: usize,
    pub converged: usize,
    pub rates: Vec<LevelRate>,
    pub status: Vec<ReplicateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub points: Vec<PowerPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSurvReport {
    pub replicates: usize,
    pub converged: usize,
    /// Time points of `P(T1 > t, T2 > t | z)`.
    pub times: Vec<f64>,
    pub profile: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    pub mean_mse: f64,
    pub sd_mse: f64,
    pub status: Vec<ReplicateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureTiming {
    pub replicates: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub total_seconds: f64,
    pub status: Vec<ReplicateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub two_step: ProcedureTiming,
    pub one_step: ProcedureTiming,
    /// `1 - two_step / one_step` total time.
    pub saving: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "suite", rename_all = "lowercase")]
pub enum Report {
    Estimation(EstimationReport),
    Type1(Type1Report),
    Power(PowerReport),
    Jointsurv(JointSurvReport),
    Speed(SpeedReport),
}

fn status(r: usize, res: &Result<FitResult>) -> ReplicateStatus {
    match res {
        Ok(f) => ReplicateStatus { replicate: r, converged: f.converged, error: None },
        Err(e) => ReplicateStatus { replicate: r, converged: false, error: Some(e.to_string()) },
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Splits a covariate present in both margins off a dataset, returning the
/// reduced dataset and the column (taken from the first observed margin).
pub fn split_covariate(data: &Dataset, name: &str) -> Result<(Dataset, Vec<f64>)> {
    let pos: Vec<usize> = data
        .covariate_names
        .iter()
        .map(|n| n.iter().position(|x| x == name))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Config(format!("covariate '{name}' is not in both margins")))?;
    let mut out = data.clone();
    let mut column = Vec::with_capacity(data.len());
    for rec in out.records.iter_mut() {
        let mut value = None;
        for (j, m) in rec.margins.iter_mut().enumerate() {
            if let Some(m) = m {
                let v = m.z.remove(pos[j]);
                value.get_or_insert(v);
            }
        }
        column.push(value.expect("validated record has a margin"));
    }
    for (j, n) in out.covariate_names.iter_mut().enumerate() {
        n.remove(pos[j]);
    }
    Ok((out, column))
}

/// Asymptotic Kolmogorov tail `P(K > x) = 2 Σ (-1)^{k-1} exp(-2k²x²)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    // Below 0.2 the tail is 1 to double precision.
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test against Uniform(0,1): statistic and p-value with the
/// finite-sample scaling `(√n + 0.12 + 0.11/√n)·D`.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / nf - x).max(x - i as f64 / nf))
        .fold(0.0, f64::max);
    let sn = nf.sqrt();
    (d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d))
}

fn rates(p: &[f64], levels: &[f64]) -> Vec<LevelRate> {
    levels
        .iter()
        .map(|&level| {
            let rejections = p.iter().filter(|&&x| x < level).count();
            LevelRate { level, rejections, rate: rejections as f64 / p.len().max(1) as f64 }
        })
        .collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    Ok(match cfg.suite {
        Suite::Estimation => Report::Estimation(estimation(cfg)?),
        Suite::Type1 => Report::Type1(type1(cfg)?),
        Suite::Power => Report::Power(power(cfg)?),
        Suite::Jointsurv => Report::Jointsurv(jointsurv(cfg)?),
        Suite::Speed => Report::Speed(speed(cfg)?),
    })
}

/// Fits the generating model class (shared PO sieve margins) and summarizes
/// the covariate effects and τ.
pub fn estimation(cfg: &ExperimentConfig) -> Result<EstimationReport> {
    let sim = cfg.sim(cfg.family, Baseline::LOGLOGISTIC, 0.0, cfg.seed)?;
    let fc = cfg.fit_config(TransformSpec::PO);
    let reps: Vec<usize> = (0..cfg.replicates).collect();
    let out = par::map(cfg.execution, &reps, |&r| -> (Result<FitResult>, f64) {
        match generate_replicate(&sim, r as u64) {
            Ok((data, truth)) => (fit_joint(&data, &fc), truth.right_censoring_rate),
            Err(e) => (Err(e), f64::NAN),
        }
    });
    let status: Vec<_> = out.iter().enumerate().map(|(r, (res, _))| status(r, res)).collect();
    let fits: Vec<&FitResult> = out.iter().filter_map(|(res, _)| res.as_ref().ok()).filter(|f| f.converged).collect();
    let truth_tau = sim.copula.resolve()?.kendall_tau()?;
    let targets = [("cont", sim.beta_ng1), ("bin", sim.beta_ng2), ("snp", sim.beta_g), ("tau", truth_tau)];
    let params = targets
        .iter()
        .map(|&(name, truth)| {
            let (est, se): (Vec<f64>, Vec<f64>) = fits
                .iter()
                .map(|f| if name == "tau" { (f.tau, f.tau_se) } else { f.estimate(name).unwrap_or((f64::NAN, f64::NAN)) })
                .unzip();
            let covered = est.iter().zip(&se).filter(|(e, s)| (*e - truth).abs() <= Z975 * *s).count();
            let m = mean(&est);
            ParamSummary {
                name: name.to_string(),
                truth,
                mean_estimate: m,
                bias: m - truth,
                se: sd(&est),
                see: mean(&se),
                coverage: covered as f64 / est.len().max(1) as f64,
            }
        })
        .collect();
    let cens: Vec<f64> = out.iter().map(|(_, c)| *c).filter(|c| c.is_finite()).collect();
    Ok(EstimationReport {
        family: cfg.family,
        replicates: cfg.replicates,
        converged: fits.len(),
        mean_right_censoring: mean(&cens),
        params,
        status,
    })
}

/// Null fit without the SNP followed by the score test of the SNP; returns
/// the p-value.
fn null_score(data: &Dataset, fc: &FitConfig) -> Result<f64> {
    let (null_data, g) = split_covariate(data, "zs_snp")?;
    let null = NullFit::fit(&null_data, fc)?;
    Ok(score_test(&null_data, &null, &g, "snp", GeneticEffect::Shared)?.p_value)
}

fn score_replicates(cfg: &ExperimentConfig, beta_g: f64, seed: u64) -> Result<(Vec<f64>, Vec<ReplicateStatus>)> {
    let sim = cfg.sim(FamilyTag::Clayton, Baseline::LOGLOGISTIC, beta_g, seed)?;
    let fc = cfg.fit_config(TransformSpec::PO);
    let reps: Vec<usize> = (0..cfg.replicates).collect();
    let out = par::map(cfg.execution, &reps, |&r| generate_replicate(&sim, r as u64).and_then(|(d, _)| null_score(&d, &fc)));
    let status = out
        .iter()
        .enumerate()
        .map(|(r, res)| ReplicateStatus { replicate: r, converged: res.is_ok(), error: res.as_ref().err().map(|e| e.to_string()) })
        .collect();
    Ok((out.into_iter().filter_map(|p| p.ok()).collect(), status))
}

/// Score-test size under `β_g = 0`.
pub fn type1(cfg: &ExperimentConfig) -> Result<Type1Report> {
    let (p, status) = score_replicates(cfg, 0.0, cfg.seed)?;
    let (ks_statistic, ks_p_value) = ks_uniform(&p);
    Ok(Type1Report {
        replicates: cfg.replicates,
        converged: p.len(),
        rates: rates(&p, &cfg.levels),
        ks_statistic,
        ks_p_value,
        p_values: p,
        status,
    })
}

/// Score-test power at each effect size.
pub fn power(cfg: &ExperimentConfig) -> Result<PowerReport> {
    let points = cfg
        .effect_sizes
        .iter()
        .enumerate()
        .map(|(k, &beta_g)| {
            let (p, status) = score_replicates(cfg, beta_g, cfg.seed.wrapping_add(1 + k as u64))?;
            Ok(PowerPoint { beta_g, replicates: cfg.replicates, converged: p.len(), rates: rates(&p, &cfg.levels), status })
        })
        .collect::<Result<_>>()?;
    Ok(PowerReport { points })
}

/// Survival probabilities at which the joint-survival time points sit for
/// the reference profile.
const JOINT_LEVELS: [f64; 5] = [0.9, 0.75, 0.5, 0.35, 0.25];

/// Accuracy of `P(T1 > t, T2 > t | z)` under Clayton-Weibull data fitted
/// with PH sieve margins.
pub fn jointsurv(cfg: &ExperimentConfig) -> Result<JointSurvReport> {
    let sim = cfg.sim(FamilyTag::Clayton, Baseline::WEIBULL, 0.0, cfg.seed)?;
    let family = sim.copula.resolve()?;
    let profile = vec![6.0, 0.0, 0.0];
    let eta: f64 = profile.iter().zip(sim.beta()).map(|(z, b)| z * b).sum();
    let times: Vec<f64> = JOINT_LEVELS.iter().map(|&s| sim.baseline.quantile(s, eta)).collect();
    let truth = times
        .iter()
        .map(|&t| {
            let s = sim.baseline.survival(t, eta);
            family.cdf(s, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let fc = cfg.fit_config(TransformSpec::PH);
    let reps: Vec<usize> = (0..cfg.replicates).collect();
    let out = par::map(cfg.execution, &reps, |&r| -> Result<(Vec<f64>, bool)> {
        let (data, _) = generate_replicate(&sim, r as u64)?;
        let fit = fit_joint(&data, &fc)?;
        let model = FittedModel::new(&fit)?;
        let est = times.iter().map(|&t| model.joint(t, t, &profile, &profile)).collect::<Result<Vec<_>>>()?;
        Ok((est, fit.converged))
    });
    let status = out
        .iter()
        .enumerate()
        .map(|(r, res)| ReplicateStatus {
            replicate: r,
            converged: matches!(res, Ok((_, true))),
            error: res.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let good: Vec<&Vec<f64>> = out.iter().filter_map(|r| r.as_ref().ok()).filter(|(_, c)| *c).map(|(e, _)| e).collect();
    let mse: Vec<f64> =
        good.iter().map(|e| e.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).collect();
    let mean_estimate = (0..times.len()).map(|i| mean(&good.iter().map(|e| e[i]).collect::<Vec<_>>())).collect();
    Ok(JointSurvReport {
        replicates: cfg.replicates,
        converged: good.len(),
        times,
        profile,
        truth,
        mean_estimate,
        mean_mse: mean(&mse),
        sd_mse: sd(&mse),
        status,
    })
}

fn timed(
    cfg: &ExperimentConfig,
    sim: &SimConfig,
    fit: impl Fn(&Dataset) -> Result<FitResult> + Sync,
) -> ProcedureTiming {
    let reps: Vec<usize> = (0..cfg.replicates).collect();
    let out = par::map(cfg.execution, &reps, |&r| {
        let data = generate_replicate(sim, r as u64).map(|(d, _)| d);
        let start = Instant::now();
        let res = data.and_then(|d| fit(&d));
        (res, start.elapsed().as_secs_f64())
    });
    let status: Vec<_> = out.iter().enumerate().map(|(r, (res, _))| status(r, res)).collect();
    let failures = status.iter().filter(|s| !s.converged).count();
    ProcedureTiming {
        replicates: cfg.replicates,
        failures,
        failure_rate: failures as f64 / cfg.replicates as f64,
        total_seconds: out.iter().map(|(_, t)| t).sum(),
        status,
    }
}

/// Wall time and failures of the two-step procedure against joint
/// maximization from the default start.
pub fn speed(cfg: &ExperimentConfig) -> Result<SpeedReport> {
    let sim = cfg.sim(FamilyTag::Clayton, Baseline::LOGLOGISTIC, 0.0, cfg.seed)?;
    let fc = cfg.fit_config(TransformSpec::PO);
    let two_step = timed(cfg, &sim, |d| fit_joint(d, &fc));
    let one_step = timed(cfg, &sim, |d| fit_one_step(d, &fc));
    let saving = 1.0 - two_step.total_seconds / one_step.total_seconds;
    Ok(SpeedReport { two_step, one_step, saving })
}

fn rate_cells(r: &[LevelRate]) -> String {
    r.iter().map(|x| format!("{:.3}@{}", x.rate, x.level)).collect::<Vec<_>>().join(" ")
}

impl Report {
    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        match self {
            Report::Estimation(r) => {
                let _ = writeln!(
                    s,
                    "estimation ({:?}): {}/{} converged, right-censoring {:.3}",
                    r.family, r.converged, r.replicates, r.mean_right_censoring
                );
                let _ = writeln!(s, "{:<6} {:>8} {:>9} {:>8} {:>8} {:>8}", "param", "truth", "bias", "SE", "SEE", "CP");
                for p in &r.params {
                    let _ = writeln!(
                        s,
                        "{:<6} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>8.3}",
                        p.name, p.truth, p.bias, p.se, p.see, p.coverage
                    );
                }
            }
            Report::Type1(r) => {
                let _ = writeln!(s, "type1: {}/{} usable", r.converged, r.replicates);
                let _ = writeln!(s, "rejection {}", rate_cells(&r.rates));
                let _ = writeln!(s, "KS D {:.4} p {:.4}", r.ks_statistic, r.ks_p_value);
            }
            Report::Power(r) => {
                let _ = writeln!(s, "{:>8} {:>6} power", "beta_g", "usable");
                for p in &r.points {
                    let _ = writeln!(s, "{:>8.3} {:>6} {}", p.beta_g, p.converged, rate_cells(&p.rates));
                }
            }
            Report::Jointsurv(r) => {
                let _ = writeln!(s, "jointsurv: {}/{} converged", r.converged, r.replicates);
                let _ = writeln!(s, "{:>8} {:>8} {:>8}", "t", "truth", "mean");
                for i in 0..r.times.len() {
                    let _ = writeln!(s, "{:>8.3} {:>8.4} {:>8.4}", r.times[i], r.truth[i], r.mean_estimate[i]);
                }
                let _ = writeln!(s, "MSE mean {:.2e} sd {:.2e}", r.mean_mse, r.sd_mse);
            }
            Report::Speed(r) => {
                for (name, t) in [("two-step", &r.two_step), ("one-step", &r.one_step)] {
                    let _ = writeln!(
                        s,
                        "{name}: {:.1} s total, {} failures ({:.1}%)",
                        t.total_seconds,
                        t.failures,
                        100.0 * t.failure_rate
                    );
                }
                let _ = writeln!(s, "saving {:.1}%", 100.0 * r.saving);
            }
        }
        s
    }
}
