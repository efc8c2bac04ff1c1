//! Command-line interface: ingestion, estimation, the NPMLE existence
//! diagnostic, Monte Carlo studies, and bootstrap bands.
//!
//! Machine-readable JSON goes to stdout; human-readable diagnostics go to
//! stderr. Exit codes: 0 success, 1 validation/usage error, 2 numerical
//! failure (the module-specific error name is included in both streams).

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use truncdens::bootstrap::{bootstrap_bands, BootstrapConfig};
use truncdens::estimator::{BandwidthChoice, EstimateDetail, MethodSpec};
use truncdens::graph::{npmle_status, NpmleExistence, TruncationGraph};
use truncdens::model::{EvalGrid, TruncatedSample};
use truncdens::npmle::{is_degenerate, solve_npmle, DEFAULT_DEGENERACY_THRESHOLD};
use truncdens::simulate::{run_study, Scenario, ScenarioId, StudyReport, TauMode};
use truncdens::spline::LambdaChoice;

#[derive(Parser)]
#[command(name = "truncdens")]
#[command(about = "Nonparametric density estimation from doubly truncated data", version)]
struct Cli {
    /// RNG seed for simulation and bootstrap
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads (0 = all cores, 1 = fully sequential)
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Number of evaluation grid points
    #[arg(long, global = true, default_value_t = 101)]
    grid: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the density from a CSV of u,v,x records
    Estimate(EstimateArgs),
    /// Diagnose NPMLE existence/uniqueness via the truncation graph
    Check(CheckArgs),
    /// Compute the NPMLE probability masses
    Npmle(NpmleArgs),
    /// Run a Monte Carlo study and tabulate ISE statistics
    Simulate(SimulateArgs),
    /// Pointwise percentile confidence bands by bootstrap resampling
    Bootstrap(BootstrapArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodName {
    /// Ordinary smoothing spline (ignores the sampling bias)
    SplineOrd,
    /// Truncation-corrected smoothing spline
    SplineCor,
    /// NPMLE-weighted Gaussian kernel estimator
    Kde,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with header u,v,x
    file: PathBuf,

    /// Estimation method
    #[arg(long, value_enum)]
    method: MethodName,

    /// Fixed smoothing parameter (splines only; skips cross-validation)
    #[arg(long)]
    lambda: Option<f64>,

    /// Cross-validation inflation factor (splines only)
    #[arg(long, default_value_t = 1.4)]
    alpha: f64,

    /// Bandwidth: `dpi1` or a fixed positive value (kde only)
    #[arg(long, default_value = "dpi1")]
    bw: String,

    /// Working domain `LO,HI` (default: observed x-range padded by 5%)
    #[arg(long, value_parser = parse_domain)]
    domain: Option<(f64, f64)>,

    /// Write a TSV sidecar (x, value) for plotting
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Input CSV with header u,v,x
    file: PathBuf,

    /// Working domain `LO,HI`
    #[arg(long, value_parser = parse_domain)]
    domain: Option<(f64, f64)>,
}

#[derive(Args)]
struct NpmleArgs {
    /// Input CSV with header u,v,x
    file: PathBuf,

    /// Sup-norm tolerance on the mass updates
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,

    /// Iteration cap
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,

    /// Single-atom mass above which the weights are flagged degenerate
    #[arg(long, default_value_t = DEFAULT_DEGENERACY_THRESHOLD)]
    degeneracy_threshold: f64,

    /// Working domain `LO,HI`
    #[arg(long, value_parser = parse_domain)]
    domain: Option<(f64, f64)>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario: S1, S2, S3 or S4
    #[arg(long)]
    scenario: String,

    /// Observation-window mode
    #[arg(long, default_value = "constant")]
    tau: String,

    /// Sample size per trial
    #[arg(long, default_value_t = 200)]
    n: usize,

    /// Monte Carlo trials
    #[arg(long, default_value_t = 250)]
    trials: usize,

    /// Comma-separated methods to score
    #[arg(long, default_value = "spline-ord,spline-cor,kde")]
    methods: String,

    /// Output directory for the per-trial CSV and summary tables
    #[arg(long, default_value = "study")]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Input CSV with header u,v,x
    file: PathBuf,

    /// Estimation method
    #[arg(long, value_enum)]
    method: MethodName,

    /// Bootstrap replicates
    #[arg(long, default_value_t = 250)]
    b: usize,

    /// Two-sided confidence level
    #[arg(long, default_value_t = 0.95)]
    level: f64,

    /// Reuse the original fit's smoothing parameter in every replicate
    #[arg(long)]
    freeze_smoothing: bool,

    /// Working domain `LO,HI`
    #[arg(long, value_parser = parse_domain)]
    domain: Option<(f64, f64)>,

    /// Write a TSV sidecar (x, value, lower, upper) for plotting
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

fn parse_domain(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected LO,HI".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| "LO is not a number")?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| "HI is not a number")?;
    if !(lo < hi) {
        return Err("need LO < HI".into());
    }
    Ok((lo, hi))
}

enum CliError {
    /// Bad input: file, CSV, flags. Exit 1.
    Validation(String),
    /// The computation itself failed. Exit 2, with the module error name.
    Numerical { code: String, message: String },
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<truncdens::estimator::EstimateError> for CliError {
    fn from(e: truncdens::estimator::EstimateError) -> Self {
        Self::Numerical {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (also used for --help/--version)
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let result = match &cli.command {
        Command::Estimate(args) => cmd_estimate(&cli, args),
        Command::Check(args) => cmd_check(&cli, args),
        Command::Npmle(args) => cmd_npmle(&cli, args),
        Command::Simulate(args) => cmd_simulate(&cli, args),
        Command::Bootstrap(args) => cmd_bootstrap(&cli, args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical { code, message }) => {
            eprintln!("error: {code}: {message}");
            let blob = serde_json::json!({ "error": code, "message": message });
            println!("{}", serde_json::to_string_pretty(&blob).expect("serializable"));
            ExitCode::from(2)
        }
    }
}

fn load_sample(path: &Path, domain: Option<(f64, f64)>) -> Result<TruncatedSample, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    TruncatedSample::from_csv_reader(file, domain).map_err(CliError::validation)
}

fn eval_grid(cli: &Cli, domain: (f64, f64)) -> Result<EvalGrid, CliError> {
    EvalGrid::new(domain.0, domain.1, cli.grid).map_err(CliError::validation)
}

fn emit(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("output is serializable")
    );
}

fn write_tsv(path: &Path, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    method: &'a str,
    grid: &'a [f64],
    values: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv_trace: Option<&'a [(f64, f64)]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    newton_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    degenerate_flag: Option<bool>,
}

fn build_method(
    name: MethodName,
    lambda: Option<f64>,
    alpha: f64,
    bw: &str,
) -> Result<MethodSpec, CliError> {
    let lambda_choice = match lambda {
        Some(v) if v > 0.0 => LambdaChoice::Fixed(v),
        Some(v) => return Err(CliError::Validation(format!("--lambda must be positive, got {v}"))),
        None => LambdaChoice::Select { grid: None },
    };
    if name != MethodName::Kde && bw != "dpi1" {
        return Err(CliError::Validation(
            "--bw applies only to --method kde".into(),
        ));
    }
    if name == MethodName::Kde && lambda.is_some() {
        return Err(CliError::Validation(
            "--lambda applies only to spline methods".into(),
        ));
    }
    Ok(match name {
        MethodName::SplineOrd => MethodSpec::SplineOrdinary {
            lambda: lambda_choice,
            alpha,
        },
        MethodName::SplineCor => MethodSpec::SplineCorrected {
            lambda: lambda_choice,
            alpha,
        },
        MethodName::Kde => {
            let bandwidth = if bw == "dpi1" {
                BandwidthChoice::Dpi1
            } else {
                let v: f64 = bw
                    .parse()
                    .map_err(|_| CliError::Validation(format!("--bw: expected `dpi1` or a number, got `{bw}`")))?;
                BandwidthChoice::Fixed(v)
            };
            MethodSpec::Kde { bandwidth }
        }
    })
}

fn cmd_estimate(cli: &Cli, args: &EstimateArgs) -> Result<(), CliError> {
    let sample = load_sample(&args.file, args.domain)?;
    let grid = eval_grid(cli, sample.domain())?;
    let method = build_method(args.method, args.lambda, args.alpha, &args.bw)?;
    let est = method.estimate(&sample, &grid)?;

    let output = match &est.detail {
        EstimateDetail::Spline {
            cv_trace,
            newton_iters,
        } => EstimateOutput {
            method: method.name(),
            grid: grid.points(),
            values: est.density.values(),
            lambda: Some(est.smoothing),
            cv_trace: Some(cv_trace),
            newton_iters: Some(*newton_iters),
            h: None,
            degenerate_flag: None,
        },
        EstimateDetail::Kde { .. } => EstimateOutput {
            method: method.name(),
            grid: grid.points(),
            values: est.density.values(),
            lambda: None,
            cv_trace: None,
            newton_iters: None,
            h: Some(est.smoothing),
            degenerate_flag: Some(est.degenerate),
        },
    };
    emit(&output);

    if let Some(path) = &args.plot_data {
        let rows: Vec<Vec<f64>> = grid
            .points()
            .iter()
            .zip(est.density.values())
            .map(|(&x, &v)| vec![x, v])
            .collect();
        write_tsv(path, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckOutput {
    status: NpmleExistence,
    scc_count: usize,
    components: Vec<Vec<usize>>,
    /// A vertex with no outgoing inter-component edge (0-based record
    /// index); absent when the graph is strongly connected.
    #[serde(skip_serializing_if = "Option::is_none")]
    witness_vertex: Option<usize>,
}

fn cmd_check(_cli: &Cli, args: &CheckArgs) -> Result<(), CliError> {
    let sample = load_sample(&args.file, args.domain)?;
    let graph = TruncationGraph::build(&sample);
    let status = npmle_status(&sample);
    let witness = graph.sink_vertex(&status.components);

    match status.existence {
        NpmleExistence::UniqueExists => eprintln!(
            "truncation graph is strongly connected: a unique NPMLE exists ({} records)",
            sample.len()
        ),
        NpmleExistence::DoesNotExist => eprintln!(
            "truncation graph is connected but not strongly connected ({} components): the NPMLE does not exist; record {} has no outgoing inter-component edge",
            status.components.len(),
            witness.expect("not strongly connected"),
        ),
        NpmleExistence::Disconnected => eprintln!(
            "truncation graph is disconnected ({} components): existence theory gives no verdict; record {} has no outgoing inter-component edge",
            status.components.len(),
            witness.expect("not strongly connected"),
        ),
    }

    emit(&CheckOutput {
        status: status.existence,
        scc_count: status.components.len(),
        components: status.components,
        witness_vertex: witness,
    });
    Ok(())
}

#[derive(Serialize)]
struct NpmleOutput {
    masses: Vec<f64>,
    converged: bool,
    iterations: usize,
    log_likelihood: f64,
    degenerate: bool,
}

fn cmd_npmle(_cli: &Cli, args: &NpmleArgs) -> Result<(), CliError> {
    let sample = load_sample(&args.file, args.domain)?;
    let weights = solve_npmle(&sample, args.tol, args.max_iter).map_err(|e| CliError::Numerical {
        code: "SingularDenominator".into(),
        message: e.to_string(),
    })?;
    emit(&NpmleOutput {
        masses: weights.masses().to_vec(),
        converged: weights.converged(),
        iterations: weights.iterations(),
        log_likelihood: weights.log_likelihood(),
        degenerate: is_degenerate(&weights, args.degeneracy_threshold),
    });
    Ok(())
}

fn parse_methods(spec: &str) -> Result<Vec<MethodSpec>, CliError> {
    spec.split(',')
        .map(|name| match name.trim() {
            "spline-ord" => Ok(MethodSpec::spline_ordinary()),
            "spline-cor" => Ok(MethodSpec::spline_corrected()),
            "kde" => Ok(MethodSpec::kde_dpi1()),
            other => Err(CliError::Validation(format!(
                "unknown method `{other}` (expected spline-ord, spline-cor, kde)"
            ))),
        })
        .collect()
}

fn markdown_summary(report: &StudyReport) -> String {
    let mut md = String::from("| scenario | method | MISE | SDISE | MDISE | IQRISE | trials | failures |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
    for row in &report.rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            row.scenario,
            row.method,
            fmt(row.mise),
            fmt(row.sdise),
            fmt(row.mdise),
            fmt(row.iqrise),
            row.trials,
            row.failures
        ));
    }
    md
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), CliError> {
    let id: ScenarioId = args.scenario.parse().map_err(CliError::validation)?;
    let tau: TauMode = args.tau.parse().map_err(CliError::validation)?;
    let methods = parse_methods(&args.methods)?;
    if args.trials == 0 {
        return Err(CliError::Validation("--trials must be at least 1".into()));
    }
    let scenario = Scenario {
        id,
        tau_mode: tau,
        n: args.n,
        seed: cli.seed,
    };
    let report = run_study(&[scenario], &methods, args.trials, cli.workers).map_err(|e| {
        CliError::Numerical {
            code: "AcceptanceStall".into(),
            message: e.to_string(),
        }
    })?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.out.display())))?;

    let mut csv = String::from("scenario,trial,method,ise,failed\n");
    for r in &report.per_trial {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scenario,
            r.trial,
            r.method,
            r.ise.map_or_else(String::new, |v| format!("{v}")),
            r.error.is_some()
        ));
    }
    let trials_path = args.out.join("trials.csv");
    fs::write(&trials_path, csv)
        .map_err(|e| CliError::Validation(format!("{}: {e}", trials_path.display())))?;

    let summary = serde_json::json!({ "rows": report.rows });
    let json_path = args.out.join("summary.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("serializable"),
    )
    .map_err(|e| CliError::Validation(format!("{}: {e}", json_path.display())))?;
    let md_path = args.out.join("summary.md");
    fs::write(&md_path, markdown_summary(&report))
        .map_err(|e| CliError::Validation(format!("{}: {e}", md_path.display())))?;

    emit(&summary);
    eprintln!(
        "wrote {}, {}, {}",
        trials_path.display(),
        json_path.display(),
        md_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BootstrapOutput<'a> {
    grid: &'a [f64],
    point: &'a [f64],
    lower: &'a [f64],
    upper: &'a [f64],
    failed: usize,
}

fn cmd_bootstrap(cli: &Cli, args: &BootstrapArgs) -> Result<(), CliError> {
    let sample = load_sample(&args.file, args.domain)?;
    let grid = eval_grid(cli, sample.domain())?;
    let method = build_method(args.method, None, 1.4, "dpi1")?;
    let config = BootstrapConfig {
        replicates: args.b,
        level: args.level,
        seed: cli.seed,
        workers: cli.workers,
        freeze_smoothing: args.freeze_smoothing,
    };
    let bands = bootstrap_bands(&sample, &method, &grid, &config).map_err(|e| {
        use truncdens::bootstrap::BootstrapError;
        match &e {
            BootstrapError::InvalidLevel(_) => CliError::Validation(e.to_string()),
            BootstrapError::PointEstimate(inner) => CliError::Numerical {
                code: inner.code().to_string(),
                message: e.to_string(),
            },
            BootstrapError::TooManyFailures { .. } => CliError::Numerical {
                code: "TooManyFailures".into(),
                message: e.to_string(),
            },
        }
    })?;

    emit(&BootstrapOutput {
        grid: grid.points(),
        point: bands.point.values(),
        lower: &bands.lower,
        upper: &bands.upper,
        failed: bands.replicates_failed,
    });

    if let Some(path) = &args.plot_data {
        let rows: Vec<Vec<f64>> = (0..grid.len())
            .map(|i| {
                vec![
                    grid.points()[i],
                    bands.point.values()[i],
                    bands.lower[i],
                    bands.upper[i],
                ]
            })
            .collect();
        write_tsv(path, &rows)?;
    }
    Ok(())
}
