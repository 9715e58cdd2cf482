//! Command-line front end for the trajectory bound analysis library.
//!
//! Two subcommands cover the workflow: `analyze` minimizes the certified
//! worst-case bound over the multiplier weights (for a problem file or the
//! built-in robot benchmark, optionally sweeping the uncertainty size), and
//! `rde` evaluates one backward Riccati sweep at a fixed weight vector.
//!
//! The front end is a thin shell: every number it prints or writes comes
//! from a single library call with the same options, serialized with
//! shortest round-trip formatting so files parse back bit-for-bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use trajbound::ellipsoid::{lookup, MinimizeOptions, MinimizeReport, MinimizeStatus};
use trajbound::lintime::{assemble_qsr, Iqc};
use trajbound::rde::{eval_j, RdeOptions, RdeOutcome};
use trajbound::robot2link::{build_analysis_problem, BenchmarkOptions, RobotParams, UncertaintyStructure};
use trajbound::schema::problem_from_json;
use trajbound::worstcase::{CutKind, CutOracle, ProblemOptions, RobustnessProblem, Witness};
use trajbound::Error;

/// All instances converged (or the sweep completed).
pub const EXIT_OK: i32 = 0;
/// Malformed configuration, unreadable input, or violated precondition.
pub const EXIT_CONFIG: i32 = 1;
/// At least one instance failed to certify a bound.
pub const EXIT_NOT_CERTIFIED: i32 = 2;
/// The Riccati sweep escaped before reaching the start of the horizon.
pub const EXIT_ESCAPED: i32 = 3;

#[derive(Parser)]
#[command(
    name = "trajbound",
    version,
    about = "Certified worst-case deviation bounds for trajectory-tracking systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Minimize the certified bound over the multiplier weights.
    Analyze(AnalyzeArgs),
    /// Run one backward Riccati sweep at a fixed weight vector.
    Rde(RdeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    /// One gain bound on the full torque error.
    Full,
    /// Gain bound on the first joint only.
    Ch1,
    /// Gain bound on the second joint only.
    Ch2,
    /// Independent gain bounds on both joints (two weights).
    Diagonal,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Problem description in JSON, as written by the schema module.
    #[arg(long, conflicts_with = "benchmark")]
    pub problem: Option<PathBuf>,

    /// Built-in benchmark name (`robot2link`).
    #[arg(long)]
    pub benchmark: Option<String>,

    /// Uncertainty structure for the benchmark.
    #[arg(long, value_enum)]
    pub structure: Option<StructureArg>,

    /// Uncertainty size: a single value or an inclusive `start:stop:step`
    /// sweep (stop included when it lands on the step grid within 1e-12).
    #[arg(long)]
    pub beta: Option<String>,

    /// First-joint uncertainty size (diagonal structure).
    #[arg(long)]
    pub beta1: Option<f64>,

    /// Second-joint uncertainty size (diagonal structure).
    #[arg(long)]
    pub beta2: Option<f64>,

    /// Relative duality-gap target for convergence.
    #[arg(long, default_value_t = 0.01)]
    pub gap: f64,

    /// Radius of the initial search region (ball for two or more weights,
    /// interval end for one weight).
    #[arg(long)]
    pub radius: Option<f64>,

    /// Iteration budget for the weight minimization.
    #[arg(long)]
    pub max_iter: Option<usize>,

    /// Relative tolerance of the Riccati integrator.
    #[arg(long)]
    pub rtol: Option<f64>,

    /// Absolute tolerance of the Riccati integrator.
    #[arg(long)]
    pub atol: Option<f64>,

    /// Minimization strategy: a registered name or `auto`.
    #[arg(long, default_value = "auto")]
    pub solver: String,

    /// Number of sweep instances analyzed concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Output directory for results.json, iterations.csv, and witness.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    /// Grid points of the benchmark trajectory.
    #[arg(long)]
    pub grid_points: Option<usize>,

    /// Horizon of the benchmark trajectory in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Args)]
pub struct RdeArgs {
    /// Problem description in JSON, as written by the schema module.
    #[arg(long)]
    pub problem: PathBuf,

    /// Weight vector, comma separated, one entry per multiplier.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambda: Vec<f64>,

    /// Write the solution schedule to y.csv in the output directory.
    #[arg(long)]
    pub dump_y: bool,

    /// Relative tolerance of the Riccati integrator.
    #[arg(long)]
    pub rtol: Option<f64>,

    /// Absolute tolerance of the Riccati integrator.
    #[arg(long)]
    pub atol: Option<f64>,

    /// Output directory for rde.json and the optional y.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Entry point shared by the binary and the tests. Returns the process
/// exit code instead of exiting, so tests can call it in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successful terminations.
            let code = if err.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Rde(args) => cmd_rde(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_CONFIG
        }
    }
}

// ---------------------------------------------------------------------------
// Sweep parsing
// ---------------------------------------------------------------------------

/// Parse an uncertainty-size specification: either one positive value or an
/// inclusive `start:stop:step` sweep. The stop value is included when it
/// lands on the step grid within 1e-12.
pub fn parse_beta_sweep(spec: &str) -> Result<Vec<f64>, Error> {
    let bad = |msg: String| Error::InvalidArgument(msg);
    let parts: Vec<&str> = spec.split(':').collect();
    let values = match parts.as_slice() {
        [single] => {
            let v: f64 = single
                .parse()
                .map_err(|_| bad(format!("cannot parse uncertainty size '{single}'")))?;
            vec![v]
        }
        [start, stop, step] => {
            let parse = |s: &str| -> Result<f64, Error> {
                s.parse()
                    .map_err(|_| bad(format!("cannot parse sweep component '{s}'")))
            };
            let (start, stop, step) = (parse(start)?, parse(stop)?, parse(step)?);
            if !(step > 0.0) {
                return Err(bad(format!("sweep step must be positive, got {step}")));
            }
            if stop < start {
                return Err(bad(format!("sweep stop {stop} is below start {start}")));
            }
            let mut values = Vec::new();
            let mut k = 0usize;
            loop {
                let v = start + k as f64 * step;
                if v > stop + 1e-12 {
                    break;
                }
                values.push(v.min(stop));
                k += 1;
            }
            values
        }
        _ => {
            return Err(bad(format!(
                "uncertainty size must be a value or start:stop:step, got '{spec}'"
            )))
        }
    };
    if values.is_empty() {
        return Err(bad("uncertainty sweep is empty".into()));
    }
    if let Some(&v) = values.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(bad(format!("uncertainty sizes must be positive, got {v}")));
    }
    Ok(values)
}

// ---------------------------------------------------------------------------
// Analyze
// ---------------------------------------------------------------------------

struct Instance {
    /// Stable aggregation key; results are emitted in construction order.
    key: String,
    problem: RobustnessProblem,
}

struct InstanceResult {
    key: String,
    report: MinimizeReport,
    witness: Option<Witness>,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct ResultRecord {
    instance: String,
    status: String,
    lambda: Option<Vec<f64>>,
    j: Option<f64>,
    sqrt_j: Option<f64>,
    gap: Option<f64>,
    iterations: usize,
    wall_time_s: f64,
}

fn status_label(status: MinimizeStatus) -> &'static str {
    match status {
        MinimizeStatus::Converged => "converged",
        MinimizeStatus::IterationLimit => "iteration-limit",
        MinimizeStatus::ShapeCollapsed => "shape-collapsed",
        MinimizeStatus::NoFeasiblePoint => "no-feasible-point",
    }
}

fn kind_label(kind: CutKind) -> &'static str {
    match kind {
        CutKind::Subgradient => "subgradient",
        CutKind::Nonneg => "nonneg",
        CutKind::RIndef => "r-indef",
        CutKind::Escape => "escape",
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn rde_options(rtol: Option<f64>, atol: Option<f64>) -> RdeOptions {
    let mut opts = RdeOptions::default();
    if let Some(rtol) = rtol {
        opts.rtol = rtol;
    }
    if let Some(atol) = atol {
        opts.atol = atol;
    }
    opts
}

fn load_problem(path: &Path, rde: RdeOptions) -> Result<RobustnessProblem, Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read problem file {}: {e}", path.display()))
    })?;
    let (ga, iqcs) = problem_from_json(&text)?;
    let qsr = assemble_qsr(&ga, &iqcs)?;
    RobustnessProblem::new(ga, qsr, ProblemOptions { rde })
}

/// Build the list of analysis instances from the configuration: one for a
/// problem file, or one per uncertainty size for the benchmark.
fn build_instances(args: &AnalyzeArgs) -> Result<Vec<Instance>, Error> {
    let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
    let rde = rde_options(args.rtol, args.atol);

    if let Some(path) = &args.problem {
        if args.beta.is_some() || args.beta1.is_some() || args.beta2.is_some() {
            return bad("uncertainty sizes apply to the benchmark, not a problem file");
        }
        let key = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "problem".into());
        return Ok(vec![Instance {
            key,
            problem: load_problem(path, rde)?,
        }]);
    }

    let Some(benchmark) = &args.benchmark else {
        return bad("either --problem or --benchmark is required");
    };
    if benchmark != "robot2link" {
        return Err(Error::InvalidArgument(format!(
            "unknown benchmark '{benchmark}' (available: robot2link)"
        )));
    }
    let Some(structure) = args.structure else {
        return bad("--structure is required with --benchmark");
    };

    let params = RobotParams::default();
    let mut opts = BenchmarkOptions::default();
    if let Some(h) = args.horizon {
        opts.horizon = h;
    }
    if let Some(n) = args.grid_points {
        opts.grid_points = n;
    }
    opts.rde = rde.clone();

    if structure == StructureArg::Diagonal {
        if args.beta.is_some() {
            return bad("the diagonal structure takes --beta1 and --beta2, not --beta");
        }
        let (Some(beta1), Some(beta2)) = (args.beta1, args.beta2) else {
            return bad("the diagonal structure requires --beta1 and --beta2");
        };
        let analysis = build_analysis_problem(
            &params,
            &UncertaintyStructure::Diagonal { beta1, beta2 },
            &opts,
        )?;
        return Ok(vec![Instance {
            key: format!("diagonal beta1={beta1} beta2={beta2}"),
            problem: RobustnessProblem::new(
                analysis.ga,
                analysis.qsr,
                ProblemOptions { rde },
            )?,
        }]);
    }

    if args.beta1.is_some() || args.beta2.is_some() {
        return bad("--beta1/--beta2 apply to the diagonal structure only");
    }
    let Some(spec) = &args.beta else {
        return bad("this structure requires --beta");
    };
    let betas = parse_beta_sweep(spec)?;

    // The linearized system does not depend on the uncertainty size, so it
    // is built once and only the multiplier is reassembled per sweep value.
    let first = betas[0];
    let (kind, label) = match structure {
        StructureArg::Full => (UncertaintyStructure::FullBlock { beta: first }, "full"),
        StructureArg::Ch1 => (UncertaintyStructure::Channel1 { beta1: first }, "ch1"),
        StructureArg::Ch2 => (UncertaintyStructure::Channel2 { beta2: first }, "ch2"),
        StructureArg::Diagonal => unreachable!(),
    };
    let analysis = build_analysis_problem(&params, &kind, &opts)?;
    let template = &analysis.iqcs[0];

    let mut instances = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let iqc = Iqc::norm_bound(template.label.clone(), beta, template.n_w)?;
        let qsr = assemble_qsr(&analysis.ga, &[iqc])?;
        instances.push(Instance {
            key: format!("{label} beta={beta}"),
            problem: RobustnessProblem::new(
                analysis.ga.clone(),
                qsr,
                ProblemOptions { rde: rde.clone() },
            )?,
        });
    }
    Ok(instances)
}

fn analyze_instance(
    instance: &Instance,
    solver: &str,
    opts: &MinimizeOptions,
) -> Result<InstanceResult, Error> {
    let started = Instant::now();
    let strategy = lookup(solver, instance.problem.dim())?;
    let report = strategy.minimize(&instance.problem, opts)?;

    // Re-evaluate the best weights once to recover the disturbance that
    // realizes the bound; the minimizer itself only keeps the trace.
    let witness = match &report.best_lambda {
        Some(lambda) => instance
            .problem
            .evaluate(lambda)?
            .cut
            .witness,
        None => None,
    };
    Ok(InstanceResult {
        key: instance.key.clone(),
        report,
        witness,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn write_results_json(path: &Path, results: &[InstanceResult]) -> Result<(), Error> {
    let records: Vec<ResultRecord> = results
        .iter()
        .map(|r| ResultRecord {
            instance: r.key.clone(),
            status: status_label(r.report.status).into(),
            lambda: r
                .report
                .best_lambda
                .as_ref()
                .map(|l| l.iter().cloned().collect()),
            j: finite(r.report.best_cost),
            sqrt_j: finite(r.report.best_cost).map(f64::sqrt),
            gap: finite(r.report.gap),
            iterations: r.report.iterations(),
            wall_time_s: r.wall_time_s,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

fn write_iterations_csv(path: &Path, results: &[InstanceResult]) -> Result<(), Error> {
    let mut text = String::from("instance,iter,kind,cost,gap,lambda\n");
    for r in results {
        for rec in &r.report.trace {
            let lambda = rec
                .lambda
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                text,
                "{},{},{},{},{},\"{}\"",
                r.key,
                rec.iter,
                kind_label(rec.kind),
                rec.cost,
                rec.gap,
                lambda
            );
        }
    }
    fs::write(path, text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

/// Worst-case disturbance traces for every instance that produced one,
/// columns `instance,t,w0,w1,...`.
fn write_witness_csv(path: &Path, results: &[InstanceResult]) -> Result<(), Error> {
    let Some(width) = results
        .iter()
        .filter_map(|r| r.witness.as_ref())
        .map(|w| w.w.rows())
        .max()
    else {
        return Ok(());
    };
    let mut text = String::from("instance,t");
    for j in 0..width {
        let _ = write!(text, ",w{j}");
    }
    text.push('\n');
    for r in results {
        let Some(witness) = &r.witness else { continue };
        let grid = witness.w.grid();
        for (k, &t) in grid.points().iter().enumerate() {
            let sample = witness.w.sample(k);
            let _ = write!(text, "{},{t}", r.key);
            for j in 0..width {
                if j < sample.nrows() {
                    let _ = write!(text, ",{}", sample[(j, 0)]);
                } else {
                    let _ = write!(text, ",");
                }
            }
            text.push('\n');
        }
    }
    fs::write(path, text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32, Error> {
    if !(args.gap > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gap target must be positive, got {}",
            args.gap
        )));
    }
    let instances = build_instances(args)?;
    // Fail on an unknown solver name before spending time on the sweep.
    lookup(&args.solver, instances[0].problem.dim())?;

    let min_opts = MinimizeOptions {
        radius: args.radius,
        gap_abs: 0.0,
        gap_rel: args.gap,
        max_iter: args.max_iter,
    };

    let run_all = || -> Result<Vec<InstanceResult>, Error> {
        instances
            .par_iter()
            .map(|inst| analyze_instance(inst, &args.solver, &min_opts))
            .collect()
    };
    // Instance order is preserved by the indexed parallel iterator, so the
    // aggregated outputs do not depend on completion order or thread count.
    let results = match args.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };

    fs::create_dir_all(&args.out).map_err(|e| {
        Error::InvalidArgument(format!("cannot create {}: {e}", args.out.display()))
    })?;
    write_results_json(&args.out.join("results.json"), &results)?;
    write_iterations_csv(&args.out.join("iterations.csv"), &results)?;
    write_witness_csv(&args.out.join("witness.csv"), &results)?;

    let mut all_converged = true;
    for r in &results {
        let sqrt_j = finite(r.report.best_cost)
            .map(|j| j.sqrt().to_string())
            .unwrap_or_else(|| "-".into());
        println!(
            "{}: {} after {} iterations, sqrt(J) = {}, gap = {} ({:.2}s)",
            r.key,
            status_label(r.report.status),
            r.report.iterations(),
            sqrt_j,
            r.report.gap,
            r.wall_time_s
        );
        if r.report.near_boundary {
            println!(
                "{}: note: best weights sit near the search boundary; consider a larger --radius",
                r.key
            );
        }
        all_converged &= r.report.status == MinimizeStatus::Converged;
    }
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

// ---------------------------------------------------------------------------
// Rde
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RdeRecord {
    lambda: Vec<f64>,
    j: f64,
    sqrt_j: f64,
}

fn write_y_csv(path: &Path, y: &trajbound::MatrixSchedule) -> Result<(), Error> {
    let n = y.rows();
    let mut text = String::from("t");
    for i in 0..n {
        for j in 0..n {
            let _ = write!(text, ",y{i}{j}");
        }
    }
    text.push('\n');
    for (k, &t) in y.grid().points().iter().enumerate() {
        let sample = y.sample(k);
        let _ = write!(text, "{t}");
        for i in 0..n {
            for j in 0..n {
                let _ = write!(text, ",{}", sample[(i, j)]);
            }
        }
        text.push('\n');
    }
    fs::write(path, text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

fn cmd_rde(args: &RdeArgs) -> Result<i32, Error> {
    if let Some(&v) = args.lambda.iter().find(|&&v| v < 0.0) {
        eprintln!("error: weights must be nonnegative, got {v}");
        return Ok(EXIT_CONFIG);
    }
    let problem = load_problem(&args.problem, rde_options(args.rtol, args.atol))?;
    let m = problem.dim();
    if args.lambda.len() != m {
        return Err(Error::InvalidArgument(format!(
            "expected {m} weight(s), got {}",
            args.lambda.len()
        )));
    }
    let lambda = DVector::from_vec(args.lambda.clone());

    let outcome = match problem.solve_at(&lambda) {
        Ok(outcome) => outcome,
        Err(Error::RNotNegativeDefinite { t, max_eig }) => {
            eprintln!(
                "not certifiable: the combined cost on the disturbance is not negative \
                 definite at t = {t} (max eigenvalue {max_eig:.3e})"
            );
            return Ok(EXIT_NOT_CERTIFIED);
        }
        Err(err) => return Err(err),
    };

    fs::create_dir_all(&args.out).map_err(|e| {
        Error::InvalidArgument(format!("cannot create {}: {e}", args.out.display()))
    })?;
    match &outcome {
        RdeOutcome::Solved { y, .. } => {
            let j = eval_j(&outcome);
            println!("J = {j}");
            println!("sqrt(J) = {}", j.sqrt());
            let record = RdeRecord {
                lambda: args.lambda.clone(),
                j,
                sqrt_j: j.sqrt(),
            };
            let text = serde_json::to_string_pretty(&record)
                .map_err(|e| Error::Parse(e.to_string()))?;
            let path = args.out.join("rde.json");
            fs::write(&path, text + "\n").map_err(|e| {
                Error::InvalidArgument(format!("cannot write {}: {e}", path.display()))
            })?;
            if args.dump_y {
                write_y_csv(&args.out.join("y.csv"), y)?;
            }
            Ok(EXIT_OK)
        }
        RdeOutcome::Escaped { t_esc, y, .. } => {
            eprintln!("sweep escaped at t = {t_esc} before reaching the start of the span");
            if args.dump_y {
                write_y_csv(&args.out.join("y.csv"), y)?;
            }
            Ok(EXIT_ESCAPED)
        }
    }
}
