//! `invreg` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.

mod repro;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use invreg::checks::{Suite, TITLES};
use invreg::eval::{estimator_grid, evaluate, reconstruction_grid, Estimator, GridMode, GridSpec, EVAL_INVERSION};
use invreg::iresnet::{Model, ModelError};
use invreg::losses::LossError;
use invreg::numerics::Vector;
use invreg::oracle::{Oracle, OracleConfig, OracleError};
use invreg::problem::ProblemError;
use invreg::train::{datasets, train, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "invreg", version, about = "Invertible residual networks as regularized inverses of linear operators")]
struct Cli {
    /// Experiment config (sectioned `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and test sets of the config as CSV.
    GenData,
    /// Train a model; writes checkpoints, model.txt, report.txt, losses.csv.
    Train,
    /// Evaluate a trained model on the config's test set; writes eval.txt.
    Eval(ModelArg),
    /// Export a deformed grid for a model or an oracle estimator.
    Grid(GridArgs),
    /// Query the posterior oracle at one data point.
    Oracle(OracleArgs),
    /// Run the acceptance suite (all criteria, or the listed ids).
    Check { ids: Vec<usize> },
    /// Train the experiment matrix and write all figure data.
    Repro,
}

#[derive(Debug, Args)]
struct ModelArg {
    /// Checkpoint to load; defaults to `<out>/model.txt`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EstimatorArg {
    Pm,
    Map,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Normal,
    Direct,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Use an oracle estimator instead of a model.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Defaults to `direct` for log-det models, `normal` otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 21)]
    lines: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    hi: f64,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Data point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    y: Vec<f64>,
    /// Quadrature nodes per axis.
    #[arg(long, default_value_t = 400)]
    points: usize,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Loss(LossError::NonFiniteLoss(_) | LossError::NonFiniteGradient(_)) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Underflow(_) | OracleError::GridTooSmall { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("io: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

/// Config from `--config` (defaults when absent) with `--seed` applied.
fn load_config(cli: &Cli, required: bool) -> Result<TrainConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None if required => return Err(CliError::Validation("this command needs --config <path>".into())),
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_path(cli: &Cli, arg: &ModelArg) -> PathBuf {
    arg.model.clone().unwrap_or_else(|| cli.out.join("model.txt"))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::Train => {
            let cfg = load_config(cli, true)?;
            let (_, report) = train(&cfg, Some(&cli.out))?;
            report.write(&cli.out)?;
            print!("{}", report.summary());
            Ok(())
        }
        Command::Eval(arg) => {
            let cfg = load_config(cli, true)?;
            let model = Model::load(&model_path(cli, arg))?;
            let (_, test) = datasets(&cfg)?;
            let problem = cfg.problem.build()?;
            let report = evaluate(&model, &test, &problem, cfg.loss.objective, cfg.reg_weight());
            fs::create_dir_all(&cli.out)?;
            fs::write(cli.out.join("eval.txt"), report.to_key_values())?;
            print!("{}", report.to_key_values());
            if report.reconstruction_mse.is_finite() && report.approximation_mse.is_finite() {
                Ok(())
            } else {
                Err(CliError::Numerical("non-finite error metric".into()))
            }
        }
        Command::Grid(args) => grid(cli, args),
        Command::Oracle(args) => oracle(cli, args),
        Command::Check { ids } => check(ids),
        Command::Repro => {
            let cfg = load_config(cli, false)?;
            repro::run(&cfg, &cli.out)
        }
    }
}

fn gen_data(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli, true)?;
    let (train_set, test_set) = datasets(&cfg)?;
    fs::create_dir_all(&cli.out)?;
    train_set.write(&cli.out, "train")?;
    test_set.write(&cli.out, "test")?;
    println!("wrote {} training and {} test samples to {}", train_set.len(), test_set.len(), cli.out.display());
    Ok(())
}

fn grid(cli: &Cli, args: &GridArgs) -> Result<(), CliError> {
    let cfg = load_config(cli, false)?;
    let spec = GridSpec {
        lo: args.lo,
        hi: args.hi,
        lines: args.lines,
        samples: args.samples,
    };
    spec.validate().map_err(CliError::Validation)?;
    let problem = cfg.problem.build()?;
    let (image, stem) = match args.estimator {
        Some(e) => {
            let prior = cfg.prior.build()?;
            let oracle = Oracle::new(&prior, &problem, OracleConfig::default())?;
            let e = match e {
                EstimatorArg::Pm => Estimator::PosteriorMean,
                EstimatorArg::Map => Estimator::Map,
            };
            (estimator_grid(e, &oracle, &spec)?, format!("grid_{}", e.name()))
        }
        None => {
            let model = Model::load(&model_path(cli, &args.model))?;
            let mode = match args.mode {
                Some(ModeArg::Normal) => GridMode::Normal,
                Some(ModeArg::Direct) => GridMode::Direct,
                None => GridMode::for_objective(cfg.loss.objective),
            };
            (reconstruction_grid(&model, &problem, &spec, mode, &EVAL_INVERSION), format!("grid_{}", cfg.loss.objective))
        }
    };
    image.write(&cli.out, &stem)?;
    let flagged = image.flags.iter().filter(|f| **f).count();
    println!("wrote {} ({} points, {flagged} flagged)", cli.out.join(format!("{stem}.csv")).display(), image.flags.len());
    Ok(())
}

fn oracle(cli: &Cli, args: &OracleArgs) -> Result<(), CliError> {
    let cfg = load_config(cli, false)?;
    let prior = cfg.prior.build()?;
    let problem = cfg.problem.build()?;
    if args.y.len() != problem.output_dim() {
        return Err(CliError::Validation(format!("--y needs {} values, got {}", problem.output_dim(), args.y.len())));
    }
    let oracle = Oracle::new(
        &prior,
        &problem,
        OracleConfig {
            points: args.points,
            ..OracleConfig::default()
        },
    )?;
    let y = Vector::from_vec(args.y.clone());
    let pm = oracle.posterior_mean(&y)?;
    let map = oracle.map_estimate(&y)?;
    let score = oracle.data_score(&y)?;
    let list = |v: &Vector| v.iter().map(|x| format!("{x:.10e}")).collect::<Vec<_>>().join(",");
    println!("posterior_mean={}", list(&pm));
    println!("map={}", list(&map.x));
    println!("map_converged={}", map.converged);
    println!("data_density={:.10e}", oracle.data_density(&y)?);
    println!("data_score={}", list(&score));
    println!("tweedie_residual={:.3e}", oracle.tweedie_residual(&y)?);
    Ok(())
}

fn check(ids: &[usize]) -> Result<(), CliError> {
    if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > TITLES.len()) {
        return Err(CliError::Validation(format!("no criterion {bad}; valid ids are 1..={}", TITLES.len())));
    }
    let ids: Vec<usize> = if ids.is_empty() { (1..=TITLES.len()).collect() } else { ids.to_vec() };
    let suite = Suite::default();
    let mut failed = Vec::new();
    for id in ids {
        let o = suite.run(id);
        println!("{}", o.line());
        for d in &o.details {
            println!("    {d}");
        }
        if !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("criteria {failed:?} failed")))
    }
}

pub(crate) fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}
