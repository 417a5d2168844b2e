use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use copula_ic::copula::{CopulaFamily, FamilyTag};
use copula_ic::simulate::{
    bracket, censor_pair, empirical_tau, generate_replicate, replicate_rng, sample_event_pair, Baseline, SimConfig,
};

#[test]
fn sampled_pairs_have_target_tau_and_median() {
    for (tag, tau) in [(FamilyTag::Clayton, 0.6), (FamilyTag::Frank, 0.6), (FamilyTag::Joe, 0.2)] {
        let fam = CopulaFamily::from_tau(tag, tau, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(f64, f64)> =
            (0..20_000).map(|_| sample_event_pair(&fam, &Baseline::LOGLOGISTIC, [0.0, 0.0], &mut rng).unwrap()).collect();
        let emp = empirical_tau(&pairs);
        assert!((emp - tau).abs() < 0.01, "{tag:?}: {emp} vs {tau}");
        let below = pairs.iter().filter(|p| p.0 <= 1.0).count() as f64 / pairs.len() as f64;
        assert!((below - 0.5).abs() < 0.015, "{below}");
    }
}

#[test]
fn marginal_survival_at_true_median_is_half() {
    let fam = CopulaFamily::from_tau(FamilyTag::Clayton, 0.4, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eta = [0.7, -0.3];
    let median = [Baseline::WEIBULL.quantile(0.5, eta[0]), Baseline::WEIBULL.quantile(0.5, eta[1])];
    let n = 100_000;
    let mut above = [0usize; 2];
    for _ in 0..n {
        let (a, b) = sample_event_pair(&fam, &Baseline::WEIBULL, eta, &mut rng).unwrap();
        above[0] += usize::from(a > median[0]);
        above[1] += usize::from(b > median[1]);
    }
    for k in above {
        assert!((k as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}

#[test]
fn censoring_brackets_the_event() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..2000 {
        let t = (0.01 + i as f64 * 0.003, 3.0 - i as f64 * 0.001);
        let ((l1, r1), (l2, r2)) = censor_pair(t, 12, 0.3, &mut rng);
        assert!(l1 < t.0 && t.0 <= r1);
        assert!(l2 < t.1 && t.1 <= r2);
    }
    assert_eq!(bracket(0.1, &[1.0, 2.0]), (0.0, 1.0));
    assert_eq!(bracket(5.0, &[1.0, 2.0]), (2.0, f64::INFINITY));
}

#[test]
fn calibrated_gap_hits_censoring_target_and_covariate_moments() {
    let cfg = SimConfig::clayton_po(0.6, 0.0, 0.4, 10_000).with_calibrated_gap().unwrap();
    let (data, truth) = generate_replicate(&cfg, 0).unwrap();
    assert!((truth.right_censoring_rate - 0.25).abs() < 0.02, "{}", truth.right_censoring_rate);
    let n = data.len() as f64;
    let cont: f64 = data.records.iter().map(|r| r.margins[0].as_ref().unwrap().z[0]).sum::<f64>() / n;
    let bin: f64 = data.records.iter().map(|r| r.margins[0].as_ref().unwrap().z[1]).sum::<f64>() / n;
    let snp: f64 = data.records.iter().map(|r| r.margins[1].as_ref().unwrap().z[2]).sum::<f64>() / n;
    assert!((cont - 6.0).abs() < 0.1);
    assert!((bin - 0.5).abs() < 0.02);
    assert!((snp - 0.8).abs() < 0.03);
}

#[test]
fn replicates_are_pure_functions_of_seed_and_index() {
    let cfg = SimConfig { mean_gap: Some(1.0), seed: 17, ..SimConfig::clayton_po(0.3, 0.1, 0.3, 50) };
    let a = generate_replicate(&cfg, 4).unwrap();
    let order: Vec<_> = (0..6).rev().map(|r| generate_replicate(&cfg, r).unwrap()).collect();
    assert_eq!(a, order[1]);
    use rand::Rng;
    let x: u64 = replicate_rng(17, 4).random();
    let y: u64 = replicate_rng(17, 5).random();
    assert_ne!(x, y);
}
