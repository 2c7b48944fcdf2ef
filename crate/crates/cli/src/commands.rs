use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use hwdiff::diagnostics::{
    bismut_gradient, finite_difference_gradient, fit_constants, lyapunov_check, occupation_sweep, solve_qtilde_with,
    FlowMode, GradientConfig, RadialGrid,
};
use hwdiff::ergodic::{AccumulatorConfig, ErgodicAccumulator, Observable};
use hwdiff::error::Error;
use hwdiff::experiments::{benchmark_sweep, variance_study, SweepConfig, VarianceStudyConfig};
use hwdiff::integrator::{plan_schedule, EmScheduleConfig, Merge, ReplicaSet};
use hwdiff::metrics::Benchmark1D;
use hwdiff::model::{derive_params, DiffusionParams, PhaseTypeModel};

use crate::output::{self, num, CsvWriter};

#[derive(Debug, Parser)]
#[command(name = "hwdiff", version, about = "Euler-Maruyama approximation of Halfin-Whitt diffusions")]
pub struct Cli {
    /// Worker threads (0 = one per logical core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Base seed of every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress the summary line.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a model file and print its derived constants.
    ModelCheck(ModelCheckArgs),
    /// Step size and iteration count for a target accuracy.
    Schedule(ScheduleArgs),
    /// Run replicated chains, checkpointing running statistics to CSV.
    Simulate(SimulateArgs),
    /// Asymptotic variance of an observable.
    Variance(VarianceArgs),
    /// Solve for a Lyapunov function and check its drift condition.
    Lyapunov(LyapunovArgs),
    /// Compare the Bismut gradient with finite differences.
    GradientCheck(GradientArgs),
    /// Expected occupation time of thin bands around the kink.
    Occupation(OccupationArgs),
    /// W1 error of the scalar chain against the exact density.
    #[command(name = "benchmark-1d")]
    Benchmark1d(BenchmarkArgs),
}

#[derive(Debug, Args, Serialize)]
struct ModelArg {
    /// Model file (JSON).
    #[arg(long)]
    #[serde(skip)]
    model: PathBuf,
    /// Reject phase-type distributions whose mean is not 1 instead of
    /// rescaling the service rates.
    #[arg(long)]
    strict_mean: bool,
}

#[derive(Debug, Args, Serialize)]
struct ModelCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
}

#[derive(Debug, Args, Serialize)]
struct ScheduleArgs {
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    varsigma: f64,
    #[arg(long, default_value_t = hwdiff::integrator::DEFAULT_SAFETY)]
    safety: f64,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
    #[arg(long, value_parser = unit_interval)]
    eta: f64,
    /// Steps per replica, burn-in included.
    #[arg(long)]
    steps: u64,
    /// Default: a tenth of the steps.
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    replicas: u64,
    /// Steps between CSV rows (default: a tenth of the steps).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    checkpoint: Option<u64>,
    /// Initial state (default: origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    All,
    BatchMeans,
    Autocovariance,
    Stein,
}

#[derive(Debug, Args, Serialize)]
struct VarianceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
    /// Observable: tanh-sum, indicator-positive, coordinate-tanh-<i>, sum, coordinate-<i>.
    #[arg(long, default_value = "tanh-sum")]
    h: Observable,
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.01, value_parser = unit_interval)]
    eta: f64,
    /// Steps per replica, burn-in included.
    #[arg(long, default_value_t = 2_100_000)]
    steps: u64,
    #[arg(long, default_value_t = 100_000)]
    burn_in: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    replicas: u64,
    #[arg(long, default_value_t = 10_000)]
    batch_len: usize,
    #[arg(long, default_value_t = 20_000)]
    max_lag: usize,
    #[arg(long, default_value_t = 20_000)]
    stein_points: usize,
    #[arg(long, default_value_t = 1)]
    stein_inner: usize,
    /// Series depth (default: ten correlation times).
    #[arg(long)]
    stein_depth: Option<usize>,
    #[arg(long, default_value_t = 20)]
    residual_points: usize,
    #[arg(long, default_value_t = 2000)]
    residual_inner: usize,
}

#[derive(Debug, Args, Serialize)]
struct LyapunovArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
    /// Outer grid radius in units of `sqrt(tr Sigma)`.
    #[arg(long, default_value_t = 20.0, value_parser = positive)]
    grid_radius: f64,
    #[arg(long, default_value_t = 40)]
    radii: usize,
    #[arg(long, default_value_t = 32)]
    directions: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FlowArg {
    Euler,
    Exponential,
}

#[derive(Debug, Args, Serialize)]
struct GradientArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
    #[arg(long, value_parser = unit_interval)]
    eps: f64,
    #[arg(long, value_parser = positive)]
    t: f64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = unit_interval)]
    eta: f64,
    /// Starting point (default: origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    /// Direction (default: first unit vector).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    u: Option<Vec<f64>>,
    /// Test function.
    #[arg(long, default_value = "tanh-sum")]
    h: Observable,
    /// Central-difference half width.
    #[arg(long, default_value_t = 1e-2, value_parser = positive)]
    fd_step: f64,
    #[arg(long, value_enum, default_value_t = FlowArg::Euler)]
    flow: FlowArg,
}

#[derive(Debug, Args, Serialize)]
struct OccupationArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArg,
    #[arg(long, value_delimiter = ',', required = true, value_parser = positive)]
    eps_sweep: Vec<f64>,
    #[arg(long, value_parser = positive)]
    t: f64,
    #[arg(long, default_value_t = 2000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = unit_interval)]
    eta: f64,
    /// Starting point (default: origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
enum StepsPerEta {
    Auto,
    Fixed(u64),
}

impl fmt::Display for StepsPerEta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepsPerEta::Auto => f.write_str("auto"),
            StepsPerEta::Fixed(n) => write!(f, "{n}"),
        }
    }
}

fn steps_per_eta(s: &str) -> Result<StepsPerEta, String> {
    if s == "auto" {
        return Ok(StepsPerEta::Auto);
    }
    match s.parse::<u64>() {
        Ok(n) if n > 0 => Ok(StepsPerEta::Fixed(n)),
        _ => Err(format!("expected `auto` or a positive integer, got `{s}`")),
    }
}

#[derive(Debug, Args, Serialize)]
struct BenchmarkArgs {
    #[arg(long, allow_hyphen_values = true)]
    beta: f64,
    #[arg(long, value_parser = positive)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    ca2: f64,
    #[arg(long, value_delimiter = ',', required = true, value_parser = unit_interval)]
    eta_sweep: Vec<f64>,
    /// `auto` records `horizon / eta` steps; an integer records that many
    /// steps at every step size.
    #[arg(long, default_value = "auto", value_parser = steps_per_eta)]
    #[serde(serialize_with = "display")]
    steps_per_eta: StepsPerEta,
    /// Recorded time per replica under `auto`.
    #[arg(long, default_value_t = 1e5, value_parser = positive)]
    horizon: f64,
    /// Discarded time per replica.
    #[arg(long, default_value_t = 100.0)]
    burn_in_time: f64,
    #[arg(long, default_value_t = 8)]
    replicas: usize,
}

fn display<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive and finite, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        Ok(v) => Err(format!("must lie in (0, 1), got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidModel { .. }
            | Error::NonUnitMeanPhase { .. }
            | Error::SingularRouting { .. }
            | Error::NonEllipticCovariance { .. }
            | Error::BadEpsilon(_)
            | Error::BadDelta(_)
            | Error::BadVarsigma(_)
            | Error::InvalidConfig(_)
            | Error::UntrackedObservable(_)
            | Error::TooFewBatches { .. }
            | Error::LagTooLarge { .. }
            | Error::DepthTooSmall { .. }
            | Error::BadInterval { .. }
            | Error::DimensionMismatch { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn write_failed(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
pub fn run(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("hwdiff: error: cannot start {} worker threads: {e}", cli.threads);
            return 2;
        }
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    match dispatch(&cli) {
        Ok((summary, artifact)) => {
            if let Some(path) = artifact {
                let threads = rayon::current_num_threads();
                if let Err(e) = output::write_meta(&path, argv, started, clock.elapsed(), threads) {
                    eprintln!("hwdiff: error: {}", write_failed(&path, e));
                    return 2;
                }
            }
            if !cli.quiet {
                println!("{summary}");
            }
            0
        }
        Err(f) => {
            eprintln!("hwdiff: error: {f}");
            f.code()
        }
    }
}

type Outcome = Result<(String, Option<PathBuf>), Failure>;

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::ModelCheck(a) => model_check(cli, a),
        Command::Schedule(a) => schedule(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Variance(a) => variance(cli, a),
        Command::Lyapunov(a) => lyapunov(cli, a),
        Command::GradientCheck(a) => gradient_check(cli, a),
        Command::Occupation(a) => occupation(cli, a),
        Command::Benchmark1d(a) => benchmark(cli, a),
    }
}

fn require_out(cli: &Cli, command: &str) -> Result<PathBuf, Failure> {
    cli.out.clone().ok_or_else(|| invalid(format!("`{command}` needs --out <PATH>")))
}

fn load_model(arg: &ModelArg) -> Result<PhaseTypeModel, Failure> {
    let text = std::fs::read_to_string(&arg.model)
        .map_err(|e| invalid(format!("cannot read model file {}: {e}", arg.model.display())))?;
    PhaseTypeModel::from_json_str(&text).map_err(|e| invalid(format!("{}: {e}", arg.model.display())))
}

fn load_params(arg: &ModelArg) -> Result<(PhaseTypeModel, DiffusionParams), Failure> {
    let model = load_model(arg)?;
    let params = derive_params(&model, !arg.strict_mean)?;
    Ok((model, params))
}

/// The resolved configuration recorded in artifact headers: the command's
/// arguments, the seed and the model contents (not its path).
fn resolved(cli: &Cli, args: &impl Serialize, model: Option<&PhaseTypeModel>) -> Value {
    let mut cfg = serde_json::to_value(args).expect("arguments serialize");
    cfg["seed"] = json!(cli.seed);
    if let Some(m) = model {
        let doc: Value = serde_json::from_str(&m.to_json_string()).expect("model serializes");
        cfg["model"] = doc;
    }
    cfg
}

fn point(v: Option<&Vec<f64>>, d: usize, name: &str) -> Result<Vec<f64>, Failure> {
    match v {
        None => Ok(vec![0.0; d]),
        Some(v) if v.len() == d && v.iter().all(|x| x.is_finite()) => Ok(v.clone()),
        Some(v) => Err(invalid(format!("--{name} needs {d} finite components, got {}", v.len()))),
    }
}

fn model_check(cli: &Cli, a: &ModelCheckArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let raw_zeta = match derive_params(&model, false) {
        Ok(p) => p.zeta,
        Err(Error::NonUnitMeanPhase { zeta }) => zeta,
        Err(e) => return Err(e.into()),
    };
    let params = derive_params(&model, !a.model.strict_mean)?;
    let e_gamma: f64 = params.gamma.sum();
    let growth = params.growth_constants();
    let summary = format!(
        "zeta={} e'gamma={} min_eig={} normalized={} c_op={}",
        num(raw_zeta),
        num(e_gamma),
        num(params.min_eig),
        params.normalized,
        num(growth.c_op)
    );
    let artifact = match &cli.out {
        Some(path) => {
            let result = json!({
                "zeta": raw_zeta,
                "normalized": params.normalized,
                "e_gamma": e_gamma,
                "gamma": params.gamma.as_slice(),
                "min_eig": params.min_eig,
                "r": rows(&params.r),
                "sigma": rows(&params.sigma),
                "growth": growth,
            });
            output::write_json(path, "model-check", &resolved(cli, a, Some(&model)), &result)
                .map_err(|e| write_failed(path, e))?;
            Some(path.clone())
        }
        None => None,
    };
    Ok((summary, artifact))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    hwdiff::linalg::to_rows(m)
}

fn schedule(cli: &Cli, a: &ScheduleArgs) -> Outcome {
    let s = plan_schedule(a.delta, a.varsigma, a.safety)?;
    let summary = format!("eta={} N={}", num(s.eta), s.n_steps);
    let artifact = match &cli.out {
        Some(path) => {
            output::write_json(path, "schedule", &resolved(cli, a, None), &s).map_err(|e| write_failed(path, e))?;
            Some(path.clone())
        }
        None => None,
    };
    Ok((summary, artifact))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    let out = require_out(cli, "simulate")?;
    let (model, params) = load_params(&a.model)?;
    let d = params.dim();
    let burn_in = a.burn_in.unwrap_or(a.steps / 10);
    let x0 = point(a.x0.as_ref(), d, "x0")?;
    let cfg = EmScheduleConfig::new(a.eta, a.steps, burn_in, cli.seed, x0);
    cfg.validate(d)?;
    let checkpoint = a.checkpoint.unwrap_or((a.steps / 10).max(1));

    let h = Observable::TanhSum;
    let acc_cfg = AccumulatorConfig { seed: cli.seed, ..AccumulatorConfig::new(d, vec![h]) };
    let template = ErgodicAccumulator::new(&acc_cfg, 0)?;
    let mut set = ReplicaSet::new(&params, &cfg, a.replicas as usize, |_| template.clone())?;

    let mut columns = vec!["step".to_string(), "samples".to_string()];
    columns.extend((1..=d).map(|i| format!("mean_{i}")));
    columns.extend((1..=d).map(|i| format!("second_moment_{i}")));
    columns.push(format!("mean_{h}"));
    let mut config = resolved(cli, a, Some(&model));
    config["burn_in"] = json!(burn_in);
    config["checkpoint"] = json!(checkpoint);
    config["x0"] = json!(cfg.x0);
    let mut csv = CsvWriter::create(&out, "simulate", &config, &columns).map_err(|e| write_failed(&out, e))?;

    let merged = |set: &ReplicaSet<'_, ErgodicAccumulator>| {
        set.sinks().iter().cloned().reduce(Merge::merge).expect("at least one replica")
    };
    let mut target = 0;
    while target < a.steps {
        target = target.saturating_add(checkpoint).min(a.steps);
        set.advance_to(target)?;
        let acc = merged(&set);
        if acc.count == 0 {
            continue;
        }
        let mut row = vec![target.to_string(), acc.count.to_string()];
        row.extend(acc.mean()?.into_iter().map(num));
        row.extend((0..d).map(|i| acc.raw_moment(i, 2).map(num)).collect::<Result<Vec<_>, _>>()?);
        row.push(num(acc.obs_sums[0] / acc.count as f64));
        csv.row(&row).map_err(|e| write_failed(&out, e))?;
    }

    let acc = merged(&set);
    let finals = set.finals();
    let ergodic = if acc.count > 0 {
        json!({
            "samples": acc.count,
            "mean": acc.mean()?,
            "second_moment": (0..d).map(|i| acc.raw_moment(i, 2)).collect::<Result<Vec<_>, _>>()?,
            "variance": acc.variance()?,
            "observables": { h.to_string(): acc.obs_sums[0] / acc.count as f64 },
        })
    } else {
        Value::Null
    };
    let r = finals.len() as f64;
    let ens_mean: Vec<f64> = (0..d).map(|i| finals.iter().map(|x| x[i]).sum::<f64>() / r).collect();
    let ens_cov: Option<Vec<Vec<f64>>> = (finals.len() > 1).then(|| {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        finals.iter().map(|x| (x[i] - ens_mean[i]) * (x[j] - ens_mean[j])).sum::<f64>() / (r - 1.0)
                    })
                    .collect()
            })
            .collect()
    });
    let result = json!({
        "ergodic_average": ergodic,
        "final_state_ensemble": {
            "replicas": finals.len(),
            "step": a.steps,
            "mean": ens_mean,
            "covariance": ens_cov,
            "states": finals,
        },
    });
    let summary_path = output::sidecar(&out, "summary.json");
    output::write_json(&summary_path, "simulate", &config, &result).map_err(|e| write_failed(&summary_path, e))?;
    let mean = acc.mean().unwrap_or_else(|_| vec![f64::NAN; d]);
    let summary = format!(
        "simulate: {} replicas x {} steps, {} samples, ergodic mean {:?}; wrote {}",
        a.replicas,
        a.steps,
        acc.count,
        mean,
        out.display()
    );
    Ok((summary, Some(out)))
}

fn variance(cli: &Cli, a: &VarianceArgs) -> Outcome {
    let out = require_out(cli, "variance")?;
    let (model, params) = load_params(&a.model)?;
    a.h.check_dim(params.dim())?;
    if a.burn_in >= a.steps {
        return Err(invalid(format!("--burn-in {} must be below --steps {}", a.burn_in, a.steps)));
    }
    if a.batch_len == 0 {
        return Err(invalid("--batch-len must be positive"));
    }
    let want_stein = matches!(a.method, MethodArg::All | MethodArg::Stein);
    let cfg = VarianceStudyConfig {
        observable: a.h,
        eta: a.eta,
        steps: a.steps,
        burn_in: a.burn_in,
        replicas: a.replicas as usize,
        seed: cli.seed,
        batch_len: a.batch_len,
        max_lag: a.max_lag,
        stein_points: if want_stein { a.stein_points } else { 0 },
        stein_inner: a.stein_inner,
        stein_depth: a.stein_depth,
        residual_points: if want_stein { a.residual_points } else { 0 },
        residual_inner: a.residual_inner,
    };
    if want_stein && a.stein_points < 2 {
        return Err(invalid("--stein-points must be at least 2 for the Stein estimator"));
    }
    let study = variance_study(&params, &cfg)?;

    let mut estimates = Vec::new();
    if matches!(a.method, MethodArg::All | MethodArg::BatchMeans) {
        estimates.push(&study.batch_means);
    }
    if matches!(a.method, MethodArg::All | MethodArg::Autocovariance) {
        estimates.push(&study.autocovariance);
    }
    if let Some(s) = study.stein.as_ref().filter(|_| want_stein) {
        estimates.push(s);
    }
    let estimates_json: Vec<Value> = estimates
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).expect("estimate serializes");
            v["continuous_time"] = json!(e.continuous_time(a.eta));
            v
        })
        .collect();
    let within = study.residuals.iter().filter(|p| p.residual.abs() <= 3.0 * p.residual_se).count();
    let result = json!({
        "observable": study.observable,
        "eta": study.eta,
        "samples": study.samples,
        "mean": study.mean,
        "estimates": estimates_json,
        "decay_rate": study.decay_rate,
        "residual_check": { "points": study.residuals.len(), "within_3se": within, "detail": study.residuals },
        "normality": study.normality,
    });
    output::write_json(&out, "variance", &resolved(cli, a, Some(&model)), &result).map_err(|e| write_failed(&out, e))?;
    let parts: Vec<String> = estimates
        .iter()
        .map(|e| format!("{}={} (se {})", method_name(e.method), num(e.estimate), num(e.std_error)))
        .collect();
    Ok((format!("variance of {}: {}; wrote {}", a.h, parts.join(", "), out.display()), Some(out)))
}

fn method_name(m: hwdiff::ergodic::VarianceMethod) -> &'static str {
    use hwdiff::ergodic::VarianceMethod::*;
    match m {
        BatchMeans => "batch-means",
        Autocovariance => "autocovariance",
        SteinSeries => "stein",
    }
}

fn lyapunov(cli: &Cli, a: &LyapunovArgs) -> Outcome {
    let out = require_out(cli, "lyapunov")?;
    let (model, params) = load_params(&a.model)?;
    if a.radii < 2 || a.directions < 2 {
        return Err(invalid("--radii and --directions must be at least 2"));
    }
    let grid = RadialGrid { radius_factor: a.grid_radius, n_radii: a.radii, n_directions: a.directions, seed: cli.seed };
    let mut spec = solve_qtilde_with(&params, a.kappa)?;
    let points = grid.points(&params);
    let constants = fit_constants(&mut spec, &params, &points);
    let report = lyapunov_check(&spec, &params, &points)?;
    let fine = grid.refined();
    let refined = lyapunov_check(&spec, &params, &fine.points(&params))?;
    let change = (refined.margin - report.margin).abs() / report.margin;
    let result = json!({
        "spec": spec,
        "grid": grid,
        "report": report,
        "refined": {
            "grid": fine,
            "margin": refined.margin,
            "c1_breve": refined.c1_breve,
            "grid_points": refined.grid_points,
        },
        "margin_change": change,
        "constants": constants,
    });
    output::write_json(&out, "lyapunov", &resolved(cli, a, Some(&model)), &result).map_err(|e| write_failed(&out, e))?;
    let summary = format!(
        "lyapunov: c1={} c1_breve={} margin change under refinement {}; wrote {}",
        num(report.c1),
        num(report.c1_breve),
        num(change),
        out.display()
    );
    Ok((summary, Some(out)))
}

fn gradient_check(cli: &Cli, a: &GradientArgs) -> Outcome {
    let (model, params) = load_params(&a.model)?;
    let d = params.dim();
    a.h.check_dim(d)?;
    let x = point(a.x.as_ref(), d, "x")?;
    let u = match &a.u {
        None => (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        Some(_) => point(a.u.as_ref(), d, "u")?,
    };
    let cfg = GradientConfig {
        epsilon: a.eps,
        t: a.t,
        eta: a.eta,
        n_paths: a.paths,
        seed: cli.seed,
        mode: match a.flow {
            FlowArg::Euler => FlowMode::Euler,
            FlowArg::Exponential => FlowMode::Exponential,
        },
    };
    let bismut = bismut_gradient(&params, &cfg, &a.h, &x, &u)?;
    let fd = finite_difference_gradient(&params, &cfg, &a.h, &x, &u, a.fd_step)?;
    let combined = (bismut.std_error.powi(2) + fd.std_error.powi(2)).sqrt();
    let z = (bismut.estimate - fd.estimate) / combined;
    let summary = format!(
        "gradient-check: bismut={} (se {}) finite-difference={} (se {}) z={}",
        num(bismut.estimate),
        num(bismut.std_error),
        num(fd.estimate),
        num(fd.std_error),
        num(z)
    );
    let artifact = match &cli.out {
        Some(path) => {
            let result = json!({
                "x": x,
                "u": u,
                "bismut": bismut,
                "finite_difference": fd,
                "combined_std_error": combined,
                "z": z,
            });
            let mut config = resolved(cli, a, Some(&model));
            config["x"] = json!(x);
            config["u"] = json!(u);
            output::write_json(path, "gradient-check", &config, &result)
                .map_err(|e| write_failed(path, e))?;
            Some(path.clone())
        }
        None => None,
    };
    Ok((summary, artifact))
}

fn occupation(cli: &Cli, a: &OccupationArgs) -> Outcome {
    let out = require_out(cli, "occupation")?;
    let (model, params) = load_params(&a.model)?;
    let x = point(a.x.as_ref(), params.dim(), "x")?;
    let estimates = occupation_sweep(&params, &x, a.t, &a.eps_sweep, a.paths, a.eta, cli.seed)?;
    let columns: Vec<String> =
        ["eps", "t", "paths", "estimate", "stderr", "estimate_over_eps"].iter().map(|s| s.to_string()).collect();
    let mut config = resolved(cli, a, Some(&model));
    config["x"] = json!(x);
    let mut csv = CsvWriter::create(&out, "occupation", &config, &columns)
        .map_err(|e| write_failed(&out, e))?;
    for e in &estimates {
        csv.row(&[
            num(e.epsilon),
            num(e.t),
            e.n_paths.to_string(),
            num(e.estimate),
            num(e.std_error),
            num(e.estimate / e.epsilon),
        ])
        .map_err(|err| write_failed(&out, err))?;
    }
    let ratios: Vec<String> = estimates.iter().map(|e| num(e.estimate / e.epsilon)).collect();
    Ok((format!("occupation: estimate/eps = [{}]; wrote {}", ratios.join(", "), out.display()), Some(out)))
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> Outcome {
    let out = require_out(cli, "benchmark-1d")?;
    let mut distinct = a.eta_sweep.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < hwdiff::metrics::MIN_RATE_POINTS {
        return Err(invalid(format!(
            "--eta-sweep needs at least {} distinct step sizes",
            hwdiff::metrics::MIN_RATE_POINTS
        )));
    }
    if !(a.burn_in_time >= 0.0) {
        return Err(invalid("--burn-in-time must be non-negative"));
    }
    if a.replicas == 0 {
        return Err(invalid("--replicas must be positive"));
    }
    let model = PhaseTypeModel::single_phase(a.alpha, a.beta, a.ca2);
    let params = derive_params(&model, false)?;
    let bench = Benchmark1D::for_model(a.alpha, a.beta, a.ca2)?;
    let sweep = SweepConfig {
        etas: distinct,
        horizon: a.horizon,
        burn_in_time: a.burn_in_time,
        recorded_steps: match a.steps_per_eta {
            StepsPerEta::Auto => None,
            StepsPerEta::Fixed(n) => Some(n),
        },
        replicas: a.replicas,
        seed: cli.seed,
    };
    let report = benchmark_sweep(&params, &bench, &sweep)?;
    let columns: Vec<String> = ["eta", "steps", "burn_in", "samples", "w1", "stderr", "slope", "intercept", "r2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut csv = CsvWriter::create(&out, "benchmark-1d", &resolved(cli, a, None), &columns)
        .map_err(|e| write_failed(&out, e))?;
    for p in &report.points {
        csv.row(&[
            num(p.eta),
            p.steps.to_string(),
            p.burn_in.to_string(),
            p.samples.to_string(),
            num(p.w1),
            num(p.std_error),
            num(report.fit.slope),
            num(report.fit.intercept),
            num(report.fit.r2),
        ])
        .map_err(|e| write_failed(&out, e))?;
    }
    let summary = format!(
        "benchmark-1d: slope={} r2={} monotone={}; wrote {}",
        num(report.fit.slope),
        num(report.fit.r2),
        report.monotone,
        out.display()
    );
    Ok((summary, Some(out)))
}
