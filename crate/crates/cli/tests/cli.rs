//! End-to-end checks of the command-line front end: outputs must equal
//! direct library calls bit for bit, sweep results must not depend on the
//! parallelism degree, and the documented exit codes must hold.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use tempfile::tempdir;

use trajbound::ellipsoid::{lookup, MinimizeOptions};
use trajbound::lintime::{assemble_qsr, augment, AugmentedLtv, Iqc, LtvSystem};
use trajbound::rde::eval_j;
use trajbound::schema::problem_to_json;
use trajbound::worstcase::{ProblemOptions, RobustnessProblem};
use trajbound::{MatrixSchedule, TimeGrid};

use trajbound_cli::{run, EXIT_CONFIG, EXIT_ESCAPED, EXIT_OK};

/// Scalar test loop: stable lag, unit readouts, constant channel signal.
fn scalar_problem() -> (AugmentedLtv, Vec<Iqc>) {
    let grid = TimeGrid::uniform(1.0, 101).unwrap();
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let sys = LtvSystem::new(
        MatrixSchedule::constant(grid.clone(), one(-1.0)).unwrap(),
        MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
        MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
        MatrixSchedule::constant(grid.clone(), one(0.0)).unwrap(),
        MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
        MatrixSchedule::constant(grid.clone(), one(0.0)).unwrap(),
    )
    .unwrap();
    let vbar = MatrixSchedule::constant(grid, one(1.0)).unwrap();
    let ga = augment(&sys, &vbar).unwrap();
    let iqcs = vec![Iqc::norm_bound("gain", 0.5, 1).unwrap()];
    (ga, iqcs)
}

fn export_problem(dir: &Path) -> std::path::PathBuf {
    let (ga, iqcs) = scalar_problem();
    let path = dir.join("sys.json");
    fs::write(&path, problem_to_json(&ga, &iqcs).unwrap()).unwrap();
    path
}

fn arg(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn analyze_matches_direct_library_call_bit_for_bit() {
    let dir = tempdir().unwrap();
    let problem_path = export_problem(dir.path());
    let out = dir.path().join("out");

    let code = run([
        "trajbound".into(),
        "analyze".into(),
        "--problem".into(),
        arg(&problem_path),
        "--gap".into(),
        "0.01".into(),
        "--out".into(),
        arg(&out),
    ]);
    assert_eq!(code, EXIT_OK);

    // Same computation through the library, same options.
    let (ga, iqcs) = scalar_problem();
    let qsr = assemble_qsr(&ga, &iqcs).unwrap();
    let problem = RobustnessProblem::new(ga, qsr, ProblemOptions::default()).unwrap();
    let report = lookup("auto", 1)
        .unwrap()
        .minimize(
            &problem,
            &MinimizeOptions {
                gap_rel: 0.01,
                ..Default::default()
            },
        )
        .unwrap();

    let text = fs::read_to_string(out.join("results.json")).unwrap();
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(records.len(), 1);
    let rec = &records[0];
    assert_eq!(rec["instance"], "sys");
    assert_eq!(rec["status"], "converged");
    assert_eq!(rec["iterations"].as_u64().unwrap() as usize, report.iterations());

    let j_cli = rec["j"].as_f64().unwrap();
    assert_eq!(
        j_cli.to_bits(),
        report.best_cost.to_bits(),
        "certified bound differs: CLI {j_cli} vs library {}",
        report.best_cost
    );
    let lam_cli = rec["lambda"][0].as_f64().unwrap();
    let lam_lib = report.best_lambda.as_ref().unwrap()[0];
    assert_eq!(lam_cli.to_bits(), lam_lib.to_bits());
    let gap_cli = rec["gap"].as_f64().unwrap();
    assert_eq!(gap_cli.to_bits(), report.gap.to_bits());

    // The trace and the realizing disturbance land next to the results.
    let iters = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert!(iters.starts_with("instance,iter,kind,cost,gap,lambda"));
    assert_eq!(iters.lines().count(), 1 + report.iterations());
    let witness = fs::read_to_string(out.join("witness.csv")).unwrap();
    assert!(witness.starts_with("instance,t,w0"));
    assert!(witness.lines().count() > 100);
}

#[test]
fn sweep_results_do_not_depend_on_parallelism() {
    let dir = tempdir().unwrap();
    let run_sweep = |jobs: &str, out: &Path| {
        run([
            "trajbound",
            "analyze",
            "--benchmark",
            "robot2link",
            "--structure",
            "full",
            "--beta",
            "0.1:0.3:0.1",
            "--grid-points",
            "201",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let out1 = dir.path().join("serial");
    let out3 = dir.path().join("parallel");
    let code1 = run_sweep("1", &out1);
    let code3 = run_sweep("3", &out3);
    assert_eq!(code1, EXIT_OK);
    assert_eq!(code3, EXIT_OK);

    // The iteration traces carry every visited weight and cost; they must
    // agree byte for byte across parallelism degrees.
    let iters1 = fs::read_to_string(out1.join("iterations.csv")).unwrap();
    let iters3 = fs::read_to_string(out3.join("iterations.csv")).unwrap();
    assert_eq!(iters1, iters3);
    let wit1 = fs::read_to_string(out1.join("witness.csv")).unwrap();
    let wit3 = fs::read_to_string(out3.join("witness.csv")).unwrap();
    assert_eq!(wit1, wit3);

    // results.json additionally carries wall-clock telemetry, so compare
    // every field except the timing.
    let recs1: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out1.join("results.json")).unwrap()).unwrap();
    let recs3: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out3.join("results.json")).unwrap()).unwrap();
    assert_eq!(recs1.len(), 3);
    assert_eq!(recs1.len(), recs3.len());
    for (a, b) in recs1.iter().zip(&recs3) {
        for field in ["instance", "status", "lambda", "j", "sqrt_j", "gap", "iterations"] {
            assert_eq!(a[field], b[field], "field '{field}' differs across job counts");
        }
    }

    // Sweep rows are aggregated in sweep order regardless of completion,
    // and the stop value lands on the grid exactly.
    let keys: Vec<&str> = recs1.iter().map(|r| r["instance"].as_str().unwrap()).collect();
    assert_eq!(keys, ["full beta=0.1", "full beta=0.2", "full beta=0.3"]);
}

#[test]
fn rde_reports_bound_escape_and_precondition() {
    let dir = tempdir().unwrap();
    let problem_path = export_problem(dir.path());
    let out = dir.path().join("rde-out");

    // Feasible weight: completes, writes the bound and the solution dump.
    let code = run([
        "trajbound".into(),
        "rde".into(),
        "--problem".into(),
        arg(&problem_path),
        "--lambda".into(),
        "1.5".into(),
        "--dump-y".into(),
        "--out".into(),
        arg(&out),
    ]);
    assert_eq!(code, EXIT_OK);

    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("rde.json")).unwrap()).unwrap();
    let (ga, iqcs) = scalar_problem();
    let qsr = assemble_qsr(&ga, &iqcs).unwrap();
    let problem = RobustnessProblem::new(ga, qsr, ProblemOptions::default()).unwrap();
    let outcome = problem.solve_at(&DVector::from_element(1, 1.5)).unwrap();
    let j_lib = eval_j(&outcome);
    assert_eq!(rec["j"].as_f64().unwrap().to_bits(), j_lib.to_bits());

    let y_csv = fs::read_to_string(out.join("y.csv")).unwrap();
    let mut lines = y_csv.lines();
    assert_eq!(lines.next().unwrap(), "t,y00,y01,y10,y11");
    assert!(lines.count() >= 2, "solution dump has too few samples");

    // Weight past the feasibility boundary: finite escape, exit 3.
    let code = run([
        "trajbound".into(),
        "rde".into(),
        "--problem".into(),
        arg(&problem_path),
        "--lambda".into(),
        "0.05".into(),
        "--out".into(),
        arg(&out),
    ]);
    assert_eq!(code, EXIT_ESCAPED);

    // Negative weight: precondition violation, exit 1.
    let code = run([
        "trajbound".into(),
        "rde".into(),
        "--problem".into(),
        arg(&problem_path),
        "--lambda=-0.5".into(),
        "--out".into(),
        arg(&out),
    ]);
    assert_eq!(code, EXIT_CONFIG);

    // Wrong weight count: configuration error, exit 1.
    let code = run([
        "trajbound".into(),
        "rde".into(),
        "--problem".into(),
        arg(&problem_path),
        "--lambda".into(),
        "0.5,0.5".into(),
        "--out".into(),
        arg(&out),
    ]);
    assert_eq!(code, EXIT_CONFIG);
}
