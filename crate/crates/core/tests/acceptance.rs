//! Acceptance gate: runs each criterion at its stated scale and tolerance
//! and prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=7,8` restricts the run; `ACCEPTANCE_SCALE=0.1` shrinks
//! replicate counts for quick local checks (the verdicts then do not count).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copula_ic::copula::{clayton_cdf, copula_cdf, invert_conditional, CopulaFamily, CopulaParams, FamilyTag};
use copula_ic::estimator::{fit_joint, FitConfig};
use copula_ic::experiment::{self, ExperimentConfig, Report, Suite};
use copula_ic::io::write_json;
use copula_ic::likelihood::{subject_loglik, total_loglik, Coords, Dataset, Part, PreparedData, TieMode};
use copula_ic::margins::bernstein_basis;
use copula_ic::numdiff::{gradient, hessian, DiffConfig};
use copula_ic::scoretest::chisq_sf;
use copula_ic::simulate::{empirical_tau, generate_replicate, SimConfig};

type Outcome = Result<String, String>;

struct Checks(Vec<String>);

impl Checks {
    fn new() -> Self {
        Self(Vec::new())
    }
    fn check(&mut self, ok: bool, what: String) -> &mut Self {
        if !ok {
            self.0.push(what);
        }
        self
    }
    fn done(&self, detail: String) -> Outcome {
        if self.0.is_empty() {
            Ok(detail)
        } else {
            Err(format!("{} | failed: {}", detail, self.0.join("; ")))
        }
    }
}

fn scale() -> f64 {
    std::env::var("ACCEPTANCE_SCALE").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0)
}

fn config(suite: Suite) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(suite);
    c.replicates = ((c.replicates as f64 * scale()).round() as usize).max(2);
    c
}

fn save(name: &str, report: &Report) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::create_dir_all(&dir);
    let _ = write_json(report, &dir.join(format!("{name}.json")));
    print!("{}", report.summary());
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

fn estimation() -> Outcome {
    let report = experiment::run(&config(Suite::Estimation)).map_err(|e| e.to_string())?;
    save("estimation_clayton", &report);
    let Report::Estimation(r) = report else { unreachable!() };
    let p = |n: &str| r.params.iter().find(|p| p.name == n).unwrap().clone();
    let (cont, snp, tau) = (p("cont"), p("snp"), p("tau"));
    let mut c = Checks::new();
    c.check(snp.bias.abs() <= 0.03, format!("beta_g bias {:.4}", snp.bias))
        .check(cont.bias.abs() <= 0.02, format!("beta_ng1 bias {:.4}", cont.bias))
        .check(tau.bias.abs() <= 0.02, format!("tau bias {:.4}", tau.bias));
    for q in &r.params {
        c.check(within(q.coverage, 0.90, 0.98), format!("{} coverage {:.3}", q.name, q.coverage));
    }
    let cov: Vec<String> = r.params.iter().map(|q| format!("{} {:.3}", q.name, q.coverage)).collect();
    c.done(format!(
        "{}/{} converged; bias beta_g {:.4}, beta_ng1 {:.4}, tau {:.4}; coverage {}",
        r.converged,
        r.replicates,
        snp.bias,
        cont.bias,
        tau.bias,
        cov.join(", ")
    ))
}

fn misspecification() -> Outcome {
    let mut c = Checks::new();
    let mut detail = Vec::new();
    for family in [FamilyTag::Frank, FamilyTag::Joe] {
        let mut cfg = config(Suite::Estimation);
        cfg.family = family;
        let report = experiment::run(&cfg).map_err(|e| e.to_string())?;
        save(&format!("estimation_{family:?}").to_lowercase(), &report);
        let Report::Estimation(r) = report else { unreachable!() };
        if family == FamilyTag::Frank {
            for q in r.params.iter().filter(|q| q.name != "tau") {
                c.check(q.bias.abs() <= 0.02, format!("Frank {} bias {:.4}", q.name, q.bias));
                detail.push(format!("Frank {} bias {:.4}", q.name, q.bias));
            }
        } else {
            let tau = r.params.iter().find(|q| q.name == "tau").unwrap();
            c.check(tau.bias.abs() <= 0.04, format!("Joe tau bias {:.4}", tau.bias));
            detail.push(format!("Joe tau bias {:.4} (coverage {:.3})", tau.bias, tau.coverage));
        }
    }
    c.done(detail.join(", "))
}

fn type1() -> Outcome {
    let report = experiment::run(&config(Suite::Type1)).map_err(|e| e.to_string())?;
    save("type1", &report);
    let Report::Type1(r) = report else { unreachable!() };
    let rate = |l: f64| r.rates.iter().find(|x| x.level == l).unwrap().rate;
    let mut c = Checks::new();
    c.check(within(rate(0.05), 0.035, 0.065), format!("rate@0.05 {:.3}", rate(0.05)))
        .check(within(rate(0.01), 0.004, 0.018), format!("rate@0.01 {:.3}", rate(0.01)))
        .check(r.ks_p_value > 0.01, format!("KS p {:.4}", r.ks_p_value));
    c.done(format!(
        "{}/{} usable; rejection {:.3}@0.05, {:.3}@0.01; KS D {:.4} p {:.3}",
        r.converged,
        r.replicates,
        rate(0.05),
        rate(0.01),
        r.ks_statistic,
        r.ks_p_value
    ))
}

fn power() -> Outcome {
    let report = experiment::run(&config(Suite::Power)).map_err(|e| e.to_string())?;
    save("power", &report);
    let Report::Power(r) = report else { unreachable!() };
    let pw: Vec<f64> = r.points.iter().map(|p| p.rates.iter().find(|x| x.level == 0.05).unwrap().rate).collect();
    let mut c = Checks::new();
    c.check(pw.windows(2).all(|w| w[1] >= w[0]), format!("power not nondecreasing {pw:?}"))
        .check(*pw.last().unwrap() >= 0.8, format!("strongest power {:.3}", pw.last().unwrap()));
    let cells: Vec<String> = r.points.iter().zip(&pw).map(|(p, w)| format!("beta_g {} -> {:.3}", p.beta_g, w)).collect();
    c.done(format!("power at 0.05: {}", cells.join(", ")))
}

fn jointsurv() -> Outcome {
    let report = experiment::run(&config(Suite::Jointsurv)).map_err(|e| e.to_string())?;
    save("jointsurv", &report);
    let Report::Jointsurv(r) = report else { unreachable!() };
    let mut c = Checks::new();
    c.check(r.mean_mse <= 0.005, format!("mean MSE {:.2e}", r.mean_mse));
    c.done(format!("{}/{} converged; MSE mean {:.2e} sd {:.2e}", r.converged, r.replicates, r.mean_mse, r.sd_mse))
}

fn speed() -> Outcome {
    let report = experiment::run(&config(Suite::Speed)).map_err(|e| e.to_string())?;
    save("speed", &report);
    let Report::Speed(r) = report else { unreachable!() };
    let mut c = Checks::new();
    c.check(r.two_step.failure_rate <= 0.01, format!("two-step failures {:.3}", r.two_step.failure_rate))
        .check(
            r.two_step.total_seconds <= r.one_step.total_seconds,
            format!("two-step {:.1} s > one-step {:.1} s", r.two_step.total_seconds, r.one_step.total_seconds),
        );
    c.done(format!(
        "two-step {:.1} s, {} failures; one-step {:.1} s, {} failures; saving {:.1}%",
        r.two_step.total_seconds,
        r.two_step.failures,
        r.one_step.total_seconds,
        r.one_step.failures,
        100.0 * r.saving
    ))
}

/// Upper chi-square tails from a 40-digit incomplete-gamma evaluation.
const CHISQ_ORACLE: [(usize, f64, f64); 15] = [
    (1, 0.5, 0.479_500_122_186_953_5),
    (1, 3.841_458_820_694_124, 0.050_000_000_000_000_057),
    (1, 20.0, 7.744_216_431_044_084e-6),
    (1, 60.0, 9.485_737_571_073_848e-15),
    (2, 3.841_458_820_694_124, 0.146_500_064_486_084_3),
    (2, 20.0, 4.539_992_976_248_485e-5),
    (3, 0.5, 0.918_891_411_654_675_9),
    (3, 6.634_896_601_021_214, 0.084_491_659_621_041_52),
    (3, 60.0, 5.878_230_727_906_912e-13),
    (5, 3.841_458_820_694_124, 0.572_460_462_925_802_9),
    (5, 20.0, 0.001_249_730_563_031_375_4),
    (10, 0.5, 0.999_993_388_289_439),
    (10, 6.634_896_601_021_214, 0.759_404_552_087_782_7),
    (10, 20.0, 0.029_252_688_076_961_07),
    (10, 60.0, 3.624_300_952_061_488e-9),
];

fn kernels() -> Outcome {
    let mut c = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid: Vec<f64> = (1..50).map(|i| i as f64 / 50.0).collect();

    // Fréchet bounds and 2-increasing rectangles.
    let (mut frechet, mut increasing) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = CopulaParams::new(rng.random_range(0.05..1.0), rng.random_range(0.05..20.0)).unwrap();
        for &u in &grid {
            for &v in &grid {
                let cv = copula_cdf(u, v, &p).unwrap();
                frechet = frechet.max((u + v - 1.0).max(0.0) - cv).max(cv - u.min(v));
            }
        }
        for w in grid.windows(2) {
            for x in grid.windows(2) {
                let cc = |u: f64, v: f64| copula_cdf(u, v, &p).unwrap();
                increasing = increasing.min(cc(w[1], x[1]) - cc(w[1], x[0]) - cc(w[0], x[1]) + cc(w[0], x[0]));
            }
        }
    }
    c.check(frechet <= 1e-14, format!("Frechet violation {frechet:.2e}"))
        .check(increasing >= -1e-14, format!("negative rectangle mass {increasing:.2e}"));

    // Clayton reduction.
    let mut clayton = 0.0f64;
    for kappa in [0.2, 1.0, 5.0] {
        let p = CopulaParams::new(1.0, kappa).unwrap();
        for &u in &grid {
            for &v in &grid {
                clayton = clayton.max((copula_cdf(u, v, &p).unwrap() - clayton_cdf(u, v, 1.0 / kappa).unwrap()).abs());
            }
        }
    }
    c.check(clayton < 1e-12, format!("Clayton reduction gap {clayton:.2e}"));

    // Gumbel limit as κ grows.
    let alpha = 0.6;
    let gumbel = |u: f64, v: f64| (-((-u.ln()).powf(1.0 / alpha) + (-v.ln()).powf(1.0 / alpha)).powf(alpha)).exp();
    let gaps: Vec<f64> = [1e3, 1e4, 1e5]
        .iter()
        .map(|&k| {
            let p = CopulaParams::new(alpha, k).unwrap();
            grid.iter()
                .flat_map(|&u| grid.iter().map(move |&v| (u, v)))
                .map(|(u, v)| (copula_cdf(u, v, &p).unwrap() - gumbel(u, v)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    c.check(gaps[2] < 1e-3 && gaps[0] > gaps[1] && gaps[1] > gaps[2], format!("Gumbel gaps {gaps:?}"));

    // Kendall's τ against the empirical concordance of sampled pairs.
    let fam = CopulaFamily::TwoParameter { alpha: 0.6, kappa: 0.8 };
    let pairs: Vec<(f64, f64)> = (0..20_000)
        .map(|_| {
            let u: f64 = rng.random_range(1e-9..1.0);
            let w: f64 = rng.random_range(1e-9..1.0);
            (u, invert_conditional(u, w, &fam).unwrap())
        })
        .collect();
    let (tau, emp) = (fam.kendall_tau().unwrap(), empirical_tau(&pairs));
    c.check((tau - emp).abs() < 0.01, format!("tau {tau:.4} vs empirical {emp:.4}"));

    // Bernstein partition of unity.
    let mut unity = 0.0f64;
    for m in 1..=10 {
        for i in 0..=1000 {
            let t = 3.0 * i as f64 / 1000.0;
            let s: f64 = (0..=m).map(|k| bernstein_basis(k, m, t, 0.0, 3.0).unwrap()).sum();
            unity = unity.max((s - 1.0).abs());
        }
    }
    c.check(unity < 1e-12, format!("partition of unity gap {unity:.2e}"));

    // Richardson gradients of cubics.
    let cfg = DiffConfig::default();
    let mut cubic = 0.0f64;
    for _ in 0..20 {
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| {
            a[0] * x[0].powi(3) + a[1] * x[1].powi(3) + a[2] * x[0] * x[1] * x[2] + a[3] * x[2].powi(2) * x[0]
                + a[4] * x[1] * x[1] + a[5] * x[2] + a[6]
        };
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exact = [
            3.0 * a[0] * x[0].powi(2) + a[2] * x[1] * x[2] + a[3] * x[2].powi(2),
            3.0 * a[1] * x[1].powi(2) + a[2] * x[0] * x[2] + 2.0 * a[4] * x[1],
            a[2] * x[0] * x[1] + 2.0 * a[3] * x[2] * x[0] + a[5],
        ];
        let g = gradient(&f, &x, &cfg).unwrap();
        for i in 0..3 {
            cubic = cubic.max((g[i] - exact[i]).abs());
        }
    }
    c.check(cubic < 1e-9, format!("cubic gradient error {cubic:.2e}"));

    // Hessian of a likelihood is exactly symmetric.
    let sim = SimConfig { mean_gap: Some(1.0), ..SimConfig::clayton_po(0.4, 0.0, 0.4, 100) };
    let (data, _) = generate_replicate(&sim, 0).unwrap();
    let fc = FitConfig { tie: TieMode::All, ..FitConfig::default() };
    let layout = fc.layout(&data).unwrap();
    let prep = PreparedData::centered(&data, &layout, fc.execution).unwrap();
    let x = vec![0.1, 0.1, 0.0, 0.8, 0.7, -1.5, -1.2, -1.0, -1.3];
    let h: DMatrix<f64> = hessian(&|y: &[f64]| prep.loglik(y, Coords::Natural, Part::Joint), &x, &cfg).unwrap();
    c.check(h == h.transpose(), "Hessian not symmetric".into());

    // Chi-square tails.
    let chisq = CHISQ_ORACLE
        .iter()
        .map(|&(df, x, p)| (chisq_sf(x, df).unwrap() - p).abs())
        .fold(0.0, f64::max);
    c.check(chisq < 1e-12, format!("chi-square tail error {chisq:.2e}"));

    c.done(format!(
        "Frechet {frechet:.1e}, min rectangle {increasing:.1e}, Clayton {clayton:.1e}, Gumbel@1e5 {:.1e}, \
         tau {tau:.4}/{emp:.4}, unity {unity:.1e}, cubic {cubic:.1e}, chi-square {chisq:.1e}",
        gaps[2]
    ))
}

fn two_part() -> Outcome {
    let sim = SimConfig::clayton_po(0.6, 0.0, 0.4, 400).with_calibrated_gap().map_err(|e| e.to_string())?;
    let (data, _) = generate_replicate(&sim, 11).map_err(|e| e.to_string())?;
    let mut records = data.records.clone();
    for (i, rec) in records.iter_mut().take(120).enumerate() {
        rec.margins[i % 2] = None;
    }
    let mixed = Dataset::with_t_hi(records, data.covariate_names.clone(), data.t_hi).map_err(|e| e.to_string())?;
    let cfg = FitConfig { tie: TieMode::All, ..FitConfig::default() };
    let fit = fit_joint(&mixed, &cfg).map_err(|e| e.to_string())?;
    let biv = mixed.filtered(|r| r.margins.iter().all(|m| m.is_some())).map_err(|e| e.to_string())?;
    let biv = Dataset::with_t_hi(biv.records, biv.covariate_names, mixed.t_hi).map_err(|e| e.to_string())?;
    let full = total_loglik(&mixed, &fit.params).map_err(|e| e.to_string())?;
    let reduced = total_loglik(&biv, &fit.params).map_err(|e| e.to_string())?;
    let singles: f64 = mixed.records[..120].iter().map(|r| subject_loglik(r, &fit.params).unwrap()).sum();
    let gap = (full - reduced - singles).abs();
    let mut c = Checks::new();
    c.check(fit.converged, "mixed fit did not converge".into())
        .check((fit.loglik - full).abs() < 1e-8 * full.abs(), format!("fit loglik {} vs {}", fit.loglik, full))
        .check(gap < 1e-9 * full.abs(), format!("decomposition gap {gap:.2e}"));
    c.done(format!("loglik {full:.6} = bivariate {reduced:.6} + single-margin {singles:.6} (gap {gap:.1e})"))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (7, "numerical kernels", kernels),
        (8, "two-part likelihood", two_part),
        (1, "estimation parity", estimation),
        (2, "misspecification robustness", misspecification),
        (3, "type-I error", type1),
        (4, "power shape", power),
        (5, "joint-surface accuracy", jointsurv),
        (6, "procedure robustness", speed),
    ];
    if scale() != 1.0 {
        println!("ACCEPTANCE_SCALE = {}: replicate counts reduced, verdicts are indicative only", scale());
    }
    let mut lines = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &outcome {
            Ok(d) => format!("criterion {id} ({name}): PASS [{:.0?}] {d}", start.elapsed()),
            Err(d) => format!("criterion {id} ({name}): FAIL [{:.0?}] {d}", start.elapsed()),
        };
        println!("{line}");
        lines.push((id, line, outcome.is_ok()));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary");
    for (_, line, _) in &lines {
        println!("{line}");
    }
    if lines.iter().all(|l| l.2) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
