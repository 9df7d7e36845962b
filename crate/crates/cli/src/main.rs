//! Command-line front end: scenario simulation, oracle truth curves,
//! targeted estimation, calibration, effect decompositions, and feasibility
//! diagnostics, each emitting deterministic CSV/JSON outputs plus a run
//! manifest sufficient to reproduce the run byte-for-byte.
//!
//! Exit codes: 0 ok, 2 configuration/input error, 3 infeasible calibration
//! target, 4 solver non-convergence, 1 anything else.

use alphacal::calibrate::{
    self, CalibrationTarget, CompositeOptions, McCurveEvaluator, SolveOptions,
    TargetKind,
};
use alphacal::error::Error as CoreError;
use alphacal::fit::{CovariateSpec, PropensityKind};
use alphacal::markov::TargetEvent;
use alphacal::mc::{self, ContrastSpec};
use alphacal::model::{build_scenario, InterventionSpec, Mark, ScenarioConfig, ValidatedScenario};
use alphacal::simulate::{self, CohortManifest};
use alphacal::tmle::{self, EstimationConfig, TmleConfig};
use alphacal::Path as SubjectPath;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "alphacal", version, about = "Event-history cohorts under intensity-scaling interventions: simulation, truth curves, targeted estimation, and calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a cohort and write cohort.csv + manifest.json.
    Simulate(SimulateArgs),
    /// Monte Carlo truth curves alpha -> (psi1, psi_z) as CSV.
    TruthCurve(TruthCurveArgs),
    /// Targeted estimation of psi_x(arm, alpha) from a cohort CSV.
    Estimate(EstimateArgs),
    /// Solve for the calibrated alpha and the composite outcome risk.
    Calibrate(CalibrateArgs),
    /// Effect decompositions (fixed-alpha total-joint, or matched-risk).
    Decompose(DecomposeArgs),
    /// Achievable-fraction and curve diagnostics for calibration targets.
    Feasibility(FeasibilityArgs),
    /// Re-run a previous invocation from its run_manifest.json.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Built-in preset: example1 | example2 | example3.
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario TOML file (see docs/scenario-format.md).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set models.z.eta=0.2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Sample under an intervention: arm none|0|1 (requires --alpha).
    #[arg(long)]
    arm: Option<String>,
    /// Intensity scaling; omitting both --arm and --alpha samples the
    /// observational law.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TruthCurveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated nondecreasing alpha grid.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    /// none | 0 | 1 (default none).
    #[arg(long, default_value = "none")]
    arm: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct CohortArgs {
    /// Cohort CSV (id,l0,a0,time,mark).
    #[arg(long)]
    cohort: PathBuf,
    /// Cohort manifest JSON (scenario, seed, n); source of tau and J.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Horizon override when no manifest is given.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of outcome causes (default 1 or manifest value).
    #[arg(long)]
    j: Option<u8>,
}

#[derive(Args, Debug, Clone)]
struct TmleArgs {
    /// Backward-recursion grid size.
    #[arg(long, default_value_t = 600)]
    grid_size: usize,
    #[arg(long, default_value_t = 50)]
    max_sweeps: usize,
    /// Deliberately drop covariates from a component fit, e.g.
    /// --drop 1=n_ell,n_z or --drop c=all (repeatable).
    #[arg(long = "drop", value_name = "MARK=COVS")]
    drop: Vec<String>,
    /// Propensity fit: constant | logistic.
    #[arg(long, default_value = "constant")]
    propensity: String,
}

#[derive(Args, Debug, Clone)]
struct EstimateArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value = "none")]
    arm: String,
    /// Target: outcome1 | z.
    #[arg(long, default_value = "outcome1")]
    x: String,
    #[command(flatten)]
    tmle: TmleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct CalibrateArgs {
    /// oracle (Monte Carlo truth curves) | estimate (targeted, from a cohort).
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// fixed | absolute | relative | match.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value = "none")]
    arm: String,
    /// Oracle-mode Monte Carlo replications.
    #[arg(long, default_value_t = 200_000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also compute the indirect/direct decomposition (match kind).
    #[arg(long, default_value_t = false)]
    decompose: bool,
    /// Convergence tolerance override for the alpha search.
    #[arg(long)]
    c_n: Option<f64>,
    /// Large-alpha proxy for the achievable fraction.
    #[arg(long, default_value_t = 50.0)]
    alpha_max: f64,
    #[command(flatten)]
    tmle: TmleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DecomposeArgs {
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fixed-alpha total-joint decomposition at this alpha...
    #[arg(long, conflicts_with = "matched")]
    alpha: Option<f64>,
    /// ...or the matched-risk indirect/direct decomposition for --arm.
    #[arg(long, default_value_t = false)]
    matched: bool,
    #[arg(long, default_value = "none")]
    arm: String,
    #[arg(long, default_value_t = 200_000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    tmle: TmleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FeasibilityArgs {
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Calibration level to check against the achievable fraction.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value = "none")]
    arm: String,
    #[arg(long, default_value_t = 50.0)]
    alpha_max: f64,
    #[arg(long, default_value_t = 200_000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    tmle: TmleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct RerunArgs {
    /// A run_manifest.json from a previous run.
    #[arg(long)]
    manifest: PathBuf,
    /// Redirect outputs (defaults to the original directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Infeasible(String),
    NonConvergence(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Infeasible(_) => "infeasible_target",
            CliError::NonConvergence(_) => "non_convergence",
            CliError::Other(_) => "error",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Infeasible(m) | CliError::NonConvergence(m) | CliError::Other(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InfeasibleTarget { .. } => CliError::Infeasible(msg),
            CoreError::TargetingNonConvergence { .. }
            | CoreError::FitNonConvergence { .. }
            | CoreError::BracketExhausted { .. }
            | CoreError::RootFinding(_)
            | CoreError::NoisyDerivative { .. }
            | CoreError::GridTooCoarse { .. } => CliError::NonConvergence(msg),
            CoreError::Scenario(_)
            | CoreError::Intervention(_)
            | CoreError::Path(_)
            | CoreError::Invalid(_)
            | CoreError::Toml(_)
            | CoreError::MissingArm
            | CoreError::Propensity(_)
            | CoreError::EmptyCohort
            | CoreError::Csv(_) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.message() }
            });
            eprintln!("{payload}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    argv: &'a [String],
}

fn write_run_manifest(out: &Path, argv: &[String]) -> CliResult<()> {
    let manifest = RunManifest { version: env!("CARGO_PKG_VERSION"), argv };
    fs::create_dir_all(out)?;
    fs::write(out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args, argv),
        Command::TruthCurve(args) => truth_curve(args, argv),
        Command::Estimate(args) => estimate(args, argv),
        Command::Calibrate(args) => calibrate_cmd(args, argv),
        Command::Decompose(args) => decompose(args, argv),
        Command::Feasibility(args) => feasibility(args, argv),
        Command::Rerun(args) => rerun(args),
    }
}

fn parse_arm(s: &str) -> CliResult<Option<bool>> {
    match s {
        "none" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(CliError::Config(format!("bad arm '{other}' (expected none|0|1)"))),
    }
}

fn parse_target_event(s: &str) -> CliResult<TargetEvent> {
    match s {
        "outcome1" | "1" => Ok(TargetEvent::Outcome1),
        "z" => Ok(TargetEvent::Z),
        other => Err(CliError::Config(format!("bad target '{other}' (expected outcome1|z)"))),
    }
}

fn apply_override(value: &mut toml::Value, key: &str, raw: &str) -> CliResult<()> {
    let mut node = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path '{key}' hits a non-table")))?;
        if i + 1 == parts.len() {
            let parsed: toml::Value = if let Ok(b) = raw.parse::<bool>() {
                toml::Value::Boolean(b)
            } else if let Ok(x) = raw.parse::<f64>() {
                toml::Value::Float(x)
            } else {
                toml::Value::String(raw.to_string())
            };
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn load_scenario(args: &ScenarioArgs) -> CliResult<ValidatedScenario> {
    let config = match (&args.preset, &args.scenario) {
        (Some(name), None) => ScenarioConfig::preset(name)?,
        (None, Some(path)) => ScenarioConfig::from_toml_str(&fs::read_to_string(path)?)?,
        _ => {
            return Err(CliError::Config(
                "exactly one of --preset or --scenario is required".into(),
            ))
        }
    };
    let config = if args.overrides.is_empty() {
        config
    } else {
        let mut value = toml::Value::try_from(&config)
            .map_err(|e| CliError::Config(format!("scenario serialization: {e}")))?;
        for entry in &args.overrides {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("bad --set '{entry}' (expected KEY=VALUE)")))?;
            apply_override(&mut value, key, raw)?;
        }
        value
            .try_into()
            .map_err(|e| CliError::Config(format!("scenario after overrides: {e}")))?
    };
    Ok(build_scenario(config)?)
}

struct LoadedCohort {
    paths: Vec<SubjectPath>,
    j: u8,
    tau: f64,
}

fn load_cohort(args: &CohortArgs) -> CliResult<LoadedCohort> {
    let (tau, j) = match &args.manifest {
        Some(path) => {
            let manifest: CohortManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
            (manifest.scenario.tau, manifest.scenario.j)
        }
        None => {
            let tau = args
                .tau
                .ok_or_else(|| CliError::Config("either --manifest or --tau is required".into()))?;
            (tau, args.j.unwrap_or(1))
        }
    };
    let tau = args.tau.unwrap_or(tau);
    let j = args.j.unwrap_or(j);
    let file = fs::File::open(&args.cohort)?;
    let paths = simulate::read_cohort_csv(file, tau)?;
    Ok(LoadedCohort { paths, j, tau })
}

fn parse_drops(drops: &[String]) -> CliResult<BTreeMap<Mark, CovariateSpec>> {
    let mut misspec = BTreeMap::new();
    for entry in drops {
        let (mark_s, covs) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("bad --drop '{entry}' (expected MARK=COVS)")))?;
        let mark: Mark = mark_s
            .parse()
            .map_err(|e: CoreError| CliError::Config(e.to_string()))?;
        let mut spec = CovariateSpec::default();
        for cov in covs.split(',') {
            match cov {
                "a0" => spec.a0 = false,
                "l0" => spec.l0 = false,
                "n_z" => spec.z = false,
                "n_ell" => spec.ell = false,
                "all" => spec = CovariateSpec::NONE,
                other => {
                    return Err(CliError::Config(format!(
                        "bad covariate '{other}' (expected a0|l0|n_z|n_ell|all)"
                    )))
                }
            }
        }
        misspec.insert(mark, spec);
    }
    Ok(misspec)
}

fn estimation_config(args: &TmleArgs) -> CliResult<EstimationConfig> {
    let propensity = match args.propensity.as_str() {
        "constant" => PropensityKind::Constant,
        "logistic" => PropensityKind::LogisticInL0,
        other => {
            return Err(CliError::Config(format!(
                "bad propensity '{other}' (expected constant|logistic)"
            )))
        }
    };
    Ok(EstimationConfig {
        tmle: TmleConfig {
            grid_size: args.grid_size,
            max_sweeps: args.max_sweeps,
            ..Default::default()
        },
        misspec: parse_drops(&args.drop)?,
        propensity: Some(propensity),
    })
}

fn simulate(args: SimulateArgs, argv: &[String]) -> CliResult<()> {
    let scenario = load_scenario(&args.scenario)?;
    let intervention = match (&args.arm, args.alpha) {
        (None, None) => None,
        (arm, alpha) => {
            let arm = arm.as_deref().map(parse_arm).transpose()?.flatten();
            Some(InterventionSpec::new(arm, alpha.unwrap_or(1.0))?)
        }
    };
    let cohort = simulate::sample_cohort(&scenario, intervention.as_ref(), args.n, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let file = fs::File::create(args.out.join("cohort.csv"))?;
    simulate::write_cohort_csv(&cohort.paths, file)?;
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&cohort.manifest())? + "\n",
    )?;
    write_run_manifest(&args.out, argv)
}

fn truth_curve(args: TruthCurveArgs, argv: &[String]) -> CliResult<()> {
    let scenario = load_scenario(&args.scenario)?;
    let arm = parse_arm(&args.arm)?;
    let points = mc::mc_curve(&scenario, arm, &args.alphas, args.reps, args.seed)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("curve.csv"), mc::curve_to_csv(&points))?;
    write_run_manifest(&args.out, argv)
}

fn estimate(args: EstimateArgs, argv: &[String]) -> CliResult<()> {
    let cohort = load_cohort(&args.cohort)?;
    let arm = parse_arm(&args.arm)?;
    let x = parse_target_event(&args.x)?;
    let config = estimation_config(&args.tmle)?;
    let itv = InterventionSpec::new(arm, args.alpha)?;
    let fit = tmle::estimate_alpha_fixed(&cohort.paths, cohort.j, cohort.tau, &itv, x, &config)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("estimate.json"),
        serde_json::to_string_pretty(&fit.report)? + "\n",
    )?;
    write_run_manifest(&args.out, argv)
}

fn parse_calibration_target(
    kind: &str,
    theta: Option<f64>,
    delta: Option<f64>,
    rho: Option<f64>,
    arm: Option<bool>,
) -> CliResult<CalibrationTarget> {
    let kind = match kind {
        "fixed" => TargetKind::FixedTheta {
            theta: theta.ok_or_else(|| CliError::Config("--kind fixed needs --theta".into()))?,
        },
        "absolute" => TargetKind::AbsoluteDelta {
            delta: delta.ok_or_else(|| CliError::Config("--kind absolute needs --delta".into()))?,
        },
        "relative" => TargetKind::RelativeRho {
            rho: rho.ok_or_else(|| CliError::Config("--kind relative needs --rho".into()))?,
        },
        "match" => TargetKind::MatchOtherArm,
        other => {
            return Err(CliError::Config(format!(
                "bad kind '{other}' (expected fixed|absolute|relative|match)"
            )))
        }
    };
    let target = CalibrationTarget { kind, arm };
    target.validate()?;
    Ok(target)
}

fn trace_csv(trace: &[calibrate::TracePoint]) -> String {
    let mut out = String::from("alpha,psi_z,se\n");
    for p in trace {
        out.push_str(&format!("{},{},{}\n", p.alpha, p.value, p.se));
    }
    out
}

fn calibrate_cmd(args: CalibrateArgs, argv: &[String]) -> CliResult<()> {
    let arm = parse_arm(&args.arm)?;
    let target = parse_calibration_target(&args.kind, args.theta, args.delta, args.rho, arm)?;
    let opts = CompositeOptions {
        solve: SolveOptions { c_n: args.c_n, ..Default::default() },
        l_hat_alpha: args.alpha_max,
        decompose: args.decompose,
        ..Default::default()
    };
    let report = match args.mode.as_str() {
        "oracle" => {
            let scenario = load_scenario(&args.scenario)?;
            calibrate::composite_oracle(&scenario, target, args.reps, args.seed, &opts)?
        }
        "estimate" => {
            let cohort_path = args
                .cohort
                .clone()
                .ok_or_else(|| CliError::Config("--mode estimate needs --cohort".into()))?;
            let cohort = load_cohort(&CohortArgs {
                cohort: cohort_path,
                manifest: args.manifest.clone(),
                tau: None,
                j: None,
            })?;
            let est = estimation_config(&args.tmle)?;
            calibrate::composite_estimate(&cohort.paths, cohort.j, cohort.tau, target, &est, &opts)?
        }
        other => {
            return Err(CliError::Config(format!(
                "bad mode '{other}' (expected oracle|estimate)"
            )))
        }
    };
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("calibration.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(args.out.join("trace.csv"), trace_csv(&report.trace))?;
    write_run_manifest(&args.out, argv)
}

fn decompose(args: DecomposeArgs, argv: &[String]) -> CliResult<()> {
    let arm = parse_arm(&args.arm)?;
    fs::create_dir_all(&args.out)?;
    let json = match (args.mode.as_str(), args.alpha, args.matched) {
        ("oracle", Some(alpha), false) => {
            let scenario = load_scenario(&args.scenario)?;
            let report =
                mc::mc_contrasts(&scenario, ContrastSpec::TotalJoint { alpha }, args.reps, args.seed)?;
            serde_json::to_string_pretty(&report)?
        }
        ("oracle", None, true) => {
            let scenario = load_scenario(&args.scenario)?;
            let target = CalibrationTarget { kind: TargetKind::MatchOtherArm, arm };
            let opts = CompositeOptions { decompose: true, ..Default::default() };
            let report = calibrate::composite_oracle(&scenario, target, args.reps, args.seed, &opts)?;
            serde_json::to_string_pretty(&report)?
        }
        ("estimate", Some(alpha), false) => {
            let cohort_path = args
                .cohort
                .clone()
                .ok_or_else(|| CliError::Config("--mode estimate needs --cohort".into()))?;
            let cohort = load_cohort(&CohortArgs {
                cohort: cohort_path,
                manifest: args.manifest.clone(),
                tau: None,
                j: None,
            })?;
            let est = estimation_config(&args.tmle)?;
            let report =
                calibrate::decompose_total_joint(&cohort.paths, cohort.j, cohort.tau, alpha, &est)?;
            serde_json::to_string_pretty(&report)?
        }
        ("estimate", None, true) => {
            let cohort_path = args
                .cohort
                .clone()
                .ok_or_else(|| CliError::Config("--mode estimate needs --cohort".into()))?;
            let cohort = load_cohort(&CohortArgs {
                cohort: cohort_path,
                manifest: args.manifest.clone(),
                tau: None,
                j: None,
            })?;
            let est = estimation_config(&args.tmle)?;
            let target = CalibrationTarget { kind: TargetKind::MatchOtherArm, arm };
            let opts = CompositeOptions { decompose: true, ..Default::default() };
            let report = calibrate::composite_estimate(
                &cohort.paths,
                cohort.j,
                cohort.tau,
                target,
                &est,
                &opts,
            )?;
            serde_json::to_string_pretty(&report)?
        }
        _ => {
            return Err(CliError::Config(
                "decompose needs either --alpha (total-joint) or --matched, and --mode oracle|estimate".into(),
            ))
        }
    };
    fs::write(args.out.join("decomposition.json"), json + "\n")?;
    write_run_manifest(&args.out, argv)
}

fn feasibility(args: FeasibilityArgs, argv: &[String]) -> CliResult<()> {
    let arm = parse_arm(&args.arm)?;
    let grid = calibrate::FEASIBILITY_GRID;
    let report = match args.mode.as_str() {
        "oracle" => {
            let scenario = load_scenario(&args.scenario)?;
            let mut ev = McCurveEvaluator::new(&scenario, arm, TargetEvent::Z, args.reps, args.seed);
            calibrate::feasibility_report(&mut ev, args.target, args.alpha_max, &grid, Vec::new())?
        }
        "estimate" => {
            let cohort_path = args
                .cohort
                .clone()
                .ok_or_else(|| CliError::Config("--mode estimate needs --cohort".into()))?;
            let cohort = load_cohort(&CohortArgs {
                cohort: cohort_path,
                manifest: args.manifest.clone(),
                tau: None,
                j: None,
            })?;
            let est = estimation_config(&args.tmle)?;
            let nuisances = alphacal::fit::fit_all(
                &cohort.paths,
                cohort.j,
                &est.misspec,
                est.propensity.unwrap_or(PropensityKind::Constant),
            )?;
            let l0s: Vec<f64> = cohort.paths.iter().map(|p| p.l0).collect();
            let propensity = match &nuisances.propensity {
                alphacal::fit::PropensityFit::Model(p) => Some(*p),
                alphacal::fit::PropensityFit::NoArm => None,
            };
            let mut ev = calibrate::PluginCurveEvaluator::new(
                nuisances.models.clone(),
                cohort.j,
                cohort.tau,
                est.tmle.grid_size,
                l0s,
                arm,
                propensity,
                TargetEvent::Z,
            );
            let mut alphas: Vec<f64> = grid.to_vec();
            alphas.push(args.alpha_max);
            let extremes = calibrate::weight_extremes(&cohort.paths, &nuisances, arm, &alphas)?;
            calibrate::feasibility_report(&mut ev, args.target, args.alpha_max, &grid, extremes)?
        }
        other => {
            return Err(CliError::Config(format!(
                "bad mode '{other}' (expected oracle|estimate)"
            )))
        }
    };
    // An explicitly infeasible target is a hard failure (exit 3) after the
    // diagnostics are written, so callers still get the curve and l_hat.
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("feasibility.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut curve = String::from("alpha,psi_z,se\n");
    for p in &report.curve {
        curve.push_str(&format!("{},{},{}\n", p.alpha, p.value, p.se));
    }
    fs::write(args.out.join("curve.csv"), curve)?;
    write_run_manifest(&args.out, argv)?;
    if report.feasible == Some(false) {
        return Err(CliError::Infeasible(format!(
            "target {} outside achievable interval (0, {})",
            report.level.unwrap_or(f64::NAN),
            report.l_hat
        )));
    }
    Ok(())
}

fn rerun(args: RerunArgs) -> CliResult<()> {
    #[derive(serde::Deserialize)]
    struct StoredManifest {
        argv: Vec<String>,
    }
    let manifest: StoredManifest = serde_json::from_str(&fs::read_to_string(&args.manifest)?)?;
    let mut argv = manifest.argv;
    if argv.is_empty() {
        return Err(CliError::Config("manifest has an empty argv".into()));
    }
    if let Some(out) = &args.out {
        let mut i = 0;
        while i < argv.len() {
            if argv[i] == "--out" && i + 1 < argv.len() {
                argv[i + 1] = out.display().to_string();
            }
            i += 1;
        }
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli, &argv.clone())
}
