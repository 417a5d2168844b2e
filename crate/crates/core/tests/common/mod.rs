#![allow(dead_code)]

use copula_ic::estimator::{fit_joint, FitConfig, FitResult};
use copula_ic::likelihood::{Dataset, TieMode};
use copula_ic::margins::TransformSpec;
use copula_ic::simulate::{generate_replicate, Baseline, SimConfig};

/// Clayton/log-logistic data with a fixed assessment gap.
pub fn clayton_data(n: usize, tau: f64, beta_g: f64, r: u64) -> Dataset {
    let cfg = SimConfig { mean_gap: Some(1.2), seed: 99, ..SimConfig::clayton_po(tau, beta_g, 0.4, n) };
    generate_replicate(&cfg, r).unwrap().0
}

pub fn weibull_data(n: usize, r: u64) -> Dataset {
    let cfg = SimConfig { baseline: Baseline::WEIBULL, mean_gap: Some(1.0), seed: 5, ..SimConfig::clayton_po(0.5, 0.4, 0.4, n) };
    let cfg = SimConfig { mean_gap: None, ..cfg }.with_calibrated_gap().unwrap();
    generate_replicate(&cfg, r).unwrap().0
}

pub fn shared_po() -> FitConfig {
    FitConfig { tie: TieMode::All, ..FitConfig::default() }
}

pub fn shared(transform: TransformSpec) -> FitConfig {
    FitConfig { tie: TieMode::All, transforms: [transform; 2], ..FitConfig::default() }
}

pub fn fit(data: &Dataset, cfg: &FitConfig) -> FitResult {
    let f = fit_joint(data, cfg).unwrap();
    assert!(f.converged, "fit did not converge: grad {}", f.grad_norm);
    f
}
