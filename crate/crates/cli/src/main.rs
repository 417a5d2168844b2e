use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use copula_ic::copula::FamilyTag;
use copula_ic::estimator::{fit_joint, FitConfig};
use copula_ic::experiment::{self, ExperimentConfig, Suite};
use copula_ic::io;
use copula_ic::likelihood::TieMode;
use copula_ic::margins::TransformSpec;
use copula_ic::par;
use copula_ic::predict::{survival_grid, FittedModel};
use copula_ic::scoretest::{batch_score_test, GeneticEffect, NullFit};
use copula_ic::simulate::{generate_replicate, SimConfig};
use copula_ic::Error;

/// Exit code for malformed input data or configuration.
const EXIT_INPUT: u8 = 2;
/// Exit code for a fit that did not converge (results are still written).
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "copula-ic", version, about = "Copula regression for bivariate interval-censored data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the two-parameter copula model with sieve margins.
    Fit(FitArgs),
    /// Score-test every SNP in a genotype file against one null fit.
    ScoreTest(ScoreArgs),
    /// Write simulated replicate datasets and their generating truth.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment suite and write a JSON report.
    Experiment(ExperimentArgs),
    /// Joint or conditional survival from a saved fit.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CopulaArg {
    TwoParam,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    None,
    Beta,
    All,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "two-param")]
    copula: CopulaArg,
    /// PH, PO, boxcox:R, log:R, boxcox:free or log:free.
    #[arg(long, default_value = "PO")]
    margin1: TransformSpec,
    #[arg(long, default_value = "PO")]
    margin2: TransformSpec,
    /// Bernstein polynomial degree.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, value_enum, default_value = "none")]
    tie_margins: TieArg,
}

impl ModelArgs {
    fn config(&self, workers: usize) -> FitConfig {
        let CopulaArg::TwoParam = self.copula;
        FitConfig {
            degree: self.degree,
            transforms: [self.margin1, self.margin2],
            tie: match self.tie_margins {
                TieArg::None => TieMode::None,
                TieArg::Beta => TieMode::Beta,
                TieArg::All => TieMode::All,
            },
            ..FitConfig::default()
        }
        .with_execution(par::with_workers(workers))
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "COPULA_IC_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ScoreArgs {
    /// Phenotype data without the tested SNPs.
    #[arg(long)]
    data: PathBuf,
    /// Genotype dosages keyed by id, one column per SNP.
    #[arg(long)]
    geno: PathBuf,
    /// Saved null fit; fitted from `--data` when absent.
    #[arg(long)]
    null_fit: Option<PathBuf>,
    /// Where to save the null fit when it is computed here.
    #[arg(long)]
    save_null: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Test one SNP coefficient per margin (2 df) instead of a shared one.
    #[arg(long)]
    margin_specific_g: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "COPULA_IC_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML simulation config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    suite: Suite,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generating copula for the estimation suite: clayton, frank, joe, gumbel, amh.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated genetic effects for the power suite.
    #[arg(long, value_delimiter = ',')]
    effect_sizes: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "COPULA_IC_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Comma-separated covariate profile of margin 1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z1: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z2: Vec<f64>,
    /// Comma-separated margin-1 times of the joint-survival grid.
    #[arg(long, value_delimiter = ',')]
    t1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    t2: Vec<f64>,
    /// Conditional survival of margin 2 given margin 1 had its event by this time.
    #[arg(long)]
    t_cond: Option<f64>,
    /// Additional times for the conditional survival.
    #[arg(long, value_delimiter = ',')]
    s: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn fit(args: FitArgs) -> anyhow::Result<ExitCode> {
    let data = io::read_dataset_file(&args.data)?;
    let cfg = args.model.config(args.workers);
    let start = Instant::now();
    let result = fit_joint(&data, &cfg)?;
    info!(
        "fit {} records in {:.2?}: loglik {:.4}, AIC {:.4}, converged {}",
        data.len(),
        start.elapsed(),
        result.loglik,
        result.aic,
        result.converged
    );
    if result.alpha_at_boundary {
        info!("alpha at the Clayton boundary (alpha = 1)");
    }
    io::write_json(&result, &args.out)?;
    if !result.converged {
        warn!("optimizer did not converge (gradient norm {:.3e})", result.grad_norm);
        return Ok(ExitCode::from(EXIT_NOT_CONVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn score(args: ScoreArgs) -> anyhow::Result<ExitCode> {
    let data = io::read_dataset_file(&args.data)?;
    let geno = io::read_genotypes_file(&args.geno, &data)?;
    let execution = par::with_workers(args.workers);
    let null = match &args.null_fit {
        Some(path) => {
            let null: NullFit = io::read_json(path).with_context(|| format!("reading null fit {}", path.display()))?;
            if null.fingerprint() != data.fingerprint() {
                return Err(Error::FingerprintMismatch.into());
            }
            null
        }
        None => {
            let start = Instant::now();
            let null = NullFit::fit(&data, &args.model.config(args.workers))?;
            info!("null model fitted in {:.2?}", start.elapsed());
            if let Some(path) = &args.save_null {
                io::write_json(&null, path)?;
            }
            null
        }
    };
    let effect = if args.margin_specific_g { GeneticEffect::MarginSpecific } else { GeneticEffect::Shared };
    let start = Instant::now();
    let rows = batch_score_test(&data, &null, &geno, effect, execution)?;
    let failed = rows.iter().filter(|r| r.is_err()).count();
    info!("scored {} SNPs in {:.2?} ({} failed)", rows.len(), start.elapsed(), failed);
    io::write_score_results(&rows, effect.df(), std::io::BufWriter::new(std::fs::File::create(&args.out)?))?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: SimConfig = io::read_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let cfg = cfg.with_calibrated_gap()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut censored = 0.0;
    for r in 0..args.replicates {
        let (data, truth) = generate_replicate(&cfg, r as u64)?;
        io::write_dataset_file(&data, &args.out_dir.join(format!("data_{r}.csv")))?;
        io::write_json(&truth, &args.out_dir.join(format!("truth_{r}.json")))?;
        censored += truth.right_censoring_rate;
    }
    info!(
        "wrote {} replicates; mean gap {:.4}, right-censoring {:.3} (target {:.3})",
        args.replicates,
        cfg.mean_gap.unwrap_or(f64::NAN),
        censored / args.replicates.max(1) as f64,
        cfg.right_censoring
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_family(s: &str) -> anyhow::Result<FamilyTag> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "clayton" => FamilyTag::Clayton,
        "frank" => FamilyTag::Frank,
        "joe" => FamilyTag::Joe,
        "gumbel" => FamilyTag::Gumbel,
        "amh" => FamilyTag::Amh,
        _ => bail!(Error::Config(format!("unknown copula family '{s}'"))),
    })
}

fn run_experiment(args: ExperimentArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::new(args.suite);
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = &args.family {
        cfg.family = parse_family(f)?;
    }
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(e) = args.effect_sizes {
        cfg.effect_sizes = e;
    }
    cfg.execution = par::with_workers(args.workers);
    let start = Instant::now();
    let report = experiment::run(&cfg)?;
    io::write_json(&report, &args.out)?;
    print!("{}", report.summary());
    info!("experiment finished in {:.2?}", start.elapsed());
    Ok(ExitCode::SUCCESS)
}

fn predict(args: PredictArgs) -> anyhow::Result<ExitCode> {
    let fit = io::read_json(&args.fit).with_context(|| format!("reading fit {}", args.fit.display()))?;
    match args.t_cond {
        Some(t) => {
            let model = FittedModel::new(&fit)?;
            let mut w = csv_writer(&args.out)?;
            use std::io::Write;
            writeln!(w, "s,value")?;
            for &s in &args.s {
                writeln!(w, "{s},{}", model.conditional_given_fellow(s, t, &args.z1, &args.z2)?)?;
            }
        }
        None => {
            let grid = survival_grid(&fit, &args.t1, &args.t2, &args.z1, &args.z2)?;
            io::write_grid(&grid, csv_writer(&args.out)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_writer(path: &PathBuf) -> std::io::Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Parse { .. }
            | Error::InvalidRecord { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Config(_)
            | Error::DegenerateData(_)
            | Error::FingerprintMismatch
            | Error::LayoutMismatch(_)
            | Error::Range { .. },
        ) => EXIT_INPUT,
        Some(Error::Convergence(_)) => EXIT_NOT_CONVERGED,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::ScoreTest(a) => score(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Predict(a) => predict(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
