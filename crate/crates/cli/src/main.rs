//! Batch front end: ingest a problem file, run a pipeline stage, emit CSV
//! solutions, JSON analysis reports and gnuplot scripts.
//!
//! Exit codes: 0 success, 1 usage or I/O, 2 invalid problem / failed
//! validation, 3 numerical failure (non-contraction, unresolved index, …).
//! Every error path prints a JSON object `{"error":{"code","message"}}` on
//! stderr. Outputs are deterministic: identical configuration and problem
//! file produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use volterra1k::asympt::{self, Assignment};
use volterra1k::charop::{self, ClassifyTol, PointKind};
use volterra1k::conditions;
use volterra1k::model::{self, ModelError, Problem};
use volterra1k::refine::{self, RefineError, RefineOptions};
use volterra1k::stepper::{self, GridSolution, StepperError};
use volterra1k::Dvec;

#[derive(Parser)]
#[command(
    name = "volterra1k",
    about = "First-kind Volterra equations with piecewise kernels: solve, analyze, expand, refine",
    version
)]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem file (JSON; see docs/problem-schema.json).
    problem: PathBuf,
    /// Target number of grid nodes over [0, T].
    #[arg(long, default_value_t = 1024)]
    grid: usize,
    /// Iteration tolerance (sup-norm of successive differences).
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Sampling density for condition checks.
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Expansion order N.
    #[arg(long = "N", default_value_t = 3)]
    n: usize,
    /// Weight order: `auto` or an explicit integer.
    #[arg(long, default_value = "auto")]
    nstar: String,
    /// Parameter assignment `c1=0.5,c2=1`; repeat for several family members.
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    /// Solution CSV to check against the first-kind equation.
    solution: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Mode {
    /// Check the structural hypotheses of a problem file.
    Validate(CommonArgs),
    /// Solve on [0, T] by the step method with successive approximations.
    Solve(CommonArgs),
    /// Condition reports plus classification of the characteristic family.
    Analyze(CommonArgs),
    /// Build the log-power expansion near t = 0.
    Asympt(CommonArgs),
    /// Full parametric solutions: expansion plus weighted correction.
    Refine(CommonArgs),
    /// First-kind residual report for an existing CSV solution.
    Verify(VerifyArgs),
}

struct Failure {
    code: &'static str,
    exit: i32,
    message: String,
}

impl Failure {
    fn new(code: &'static str, exit: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            exit,
            message: message.into(),
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Failure::new("io", 1, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new("invalid_problem", 2, e.to_string())
    }
}

impl From<conditions::ConditionsError> for Failure {
    fn from(e: conditions::ConditionsError) -> Self {
        match e {
            conditions::ConditionsError::Model(m) => m.into(),
            other => Failure::new("numerical_failure", 3, other.to_string()),
        }
    }
}

impl From<StepperError> for Failure {
    fn from(e: StepperError) -> Self {
        match e {
            StepperError::Model(m) => m.into(),
            StepperError::Conditions(c) => c.into(),
            StepperError::Csv(msg) => Failure::new("invalid_solution", 2, msg),
            other => Failure::new("numerical_failure", 3, other.to_string()),
        }
    }
}

impl From<charop::CharopError> for Failure {
    fn from(e: charop::CharopError) -> Self {
        match e {
            charop::CharopError::Model(m) => m.into(),
            other => Failure::new("numerical_failure", 3, other.to_string()),
        }
    }
}

impl From<asympt::AsymptError> for Failure {
    fn from(e: asympt::AsymptError) -> Self {
        match e {
            asympt::AsymptError::Model(m) => m.into(),
            asympt::AsymptError::Charop(c) => c.into(),
            asympt::AsymptError::NonSmooth { .. } => {
                Failure::new("invalid_problem", 2, e.to_string())
            }
            asympt::AsymptError::Params(msg) => Failure::new("usage", 1, msg),
            other => Failure::new("numerical_failure", 3, other.to_string()),
        }
    }
}

impl From<RefineError> for Failure {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Model(m) => m.into(),
            RefineError::Conditions(c) => c.into(),
            RefineError::Asympt(a) => a.into(),
            RefineError::Stepper(s) => s.into(),
            other => Failure::new("numerical_failure", 3, other.to_string()),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already renders help/version on stdout for those paths
            if e.use_stderr() {
                emit_error("usage", &e.to_string());
                std::process::exit(1);
            } else {
                print!("{e}");
                std::process::exit(0);
            }
        }
    };
    let result = match cli.mode {
        Mode::Validate(args) => run_validate(&args),
        Mode::Solve(args) => run_solve(&args),
        Mode::Analyze(args) => run_analyze(&args),
        Mode::Asympt(args) => run_asympt(&args),
        Mode::Refine(args) => run_refine(&args),
        Mode::Verify(args) => run_verify(&args),
    };
    if let Err(f) = result {
        emit_error(f.code, &f.message);
        std::process::exit(f.exit);
    }
}

fn emit_error(code: &str, message: &str) {
    eprintln!("{}", json!({"error": {"code": code, "message": message}}));
}

fn load_problem(path: &Path) -> Result<Problem, Failure> {
    let text = fs::read_to_string(path).map_err(Failure::io)?;
    Ok(Problem::from_json_str(&text)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(Failure::io)?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(Failure::io)?;
    Ok(path)
}

fn write_report(dir: &Path, base: &str, report: &Value) -> Result<PathBuf, Failure> {
    let mut text = serde_json::to_string_pretty(report).map_err(Failure::io)?;
    text.push('\n');
    write_out(dir, &format!("{base}.report.json"), &text)
}

fn gnuplot_script(csv_names: &[String], m: usize, base: &str) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator \",\"\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str("set xlabel \"t\"\n");
    s.push_str("set ylabel \"x\"\n");
    s.push_str("set grid\n");
    s.push_str(&format!(
        "set term pngcairo size 960,640\nset output \"{base}.png\"\n"
    ));
    let mut plots = Vec::new();
    for name in csv_names {
        for col in 0..m {
            plots.push(format!("\"{name}\" using 1:{} with lines", col + 2));
        }
    }
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

fn vec_json(v: &Dvec) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn log_points(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| lo * (hi / lo).powf(k as f64 / (count - 1) as f64))
        .collect()
}

fn parse_nstar(text: &str) -> Result<Option<u32>, Failure> {
    if text == "auto" {
        return Ok(None);
    }
    text.parse::<u32>().map(Some).map_err(|_| {
        Failure::new(
            "usage",
            1,
            format!("--nstar expects `auto` or an integer, got `{text}`"),
        )
    })
}

fn parse_assignment(text: &str) -> Result<Assignment, Failure> {
    let mut out = BTreeMap::new();
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (k, v) = piece.split_once('=').ok_or_else(|| {
            Failure::new(
                "usage",
                1,
                format!("--set expects `name=value`, got `{piece}`"),
            )
        })?;
        let value: f64 = v.trim().parse().map_err(|_| {
            Failure::new("usage", 1, format!("bad number `{v}` in --set `{piece}`"))
        })?;
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

fn run_validate(args: &CommonArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let rep = model::validate(&p, args.samples.max(16));
    let base = stem(&args.problem);
    let report = json!({
        "mode": "validate",
        "problem": args.problem.to_string_lossy(),
        "validation": rep,
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("wrote {}", path.display());
    if !rep.passed {
        return Err(Failure::new(
            "validation_failed",
            2,
            "one or more structural hypotheses failed; see the report",
        ));
    }
    Ok(())
}

fn run_solve(args: &CommonArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let validation = model::validate(&p, args.samples.max(16));
    if !validation.passed {
        return Err(Failure::new(
            "validation_failed",
            2,
            "problem fails its structural hypotheses; run `validate` for details",
        ));
    }
    let rep = conditions::check_condition_a(&p, args.samples)?;
    let plan = conditions::plan_steps(&p, &rep)?;
    let sol = stepper::solve_with_plan(&p, &plan, args.grid, args.tol, stepper::DEFAULT_MAX_ITER)?;
    let residual = stepper::residual_first_kind(&p, &sol)?;

    let base = stem(&args.problem);
    let csv_name = format!("{base}.csv");
    write_out(&args.out, &csv_name, &sol.to_csv())?;
    write_out(
        &args.out,
        &format!("{base}.plt"),
        &gnuplot_script(&[csv_name.clone()], p.m, &base),
    )?;
    let report = json!({
        "mode": "solve",
        "problem": args.problem.to_string_lossy(),
        "validation": validation,
        "condition_a": rep,
        "plan": {"h": plan.h, "epsilon": plan.epsilon, "intervals": plan.intervals.len()},
        "iterations": sol.meta.intervals,
        "residual_first_kind": residual,
        "nodes": sol.nodes.len(),
        "csv": csv_name,
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn scan_json(scan: &charop::ScanReport) -> Value {
    let points: Vec<Value> = scan
        .points
        .iter()
        .map(|pt| {
            json!({
                "j": pt.j,
                "kind": match pt.kind { PointKind::Regular => "regular", PointKind::Singular => "singular" },
                "rank_defect": pt.rank_defect,
                "index": pt.index,
                "det_test": pt.det_test,
                "phi": pt.phi.iter().map(vec_json).collect::<Vec<_>>(),
                "psi": pt.psi.iter().map(vec_json).collect::<Vec<_>>(),
            })
        })
        .collect();
    let jordan: Vec<Value> = scan
        .jordan
        .iter()
        .map(|jd| match jd {
            None => Value::Null,
            Some(jd) => json!({
                "lengths": jd.lengths,
                "solvability_det": jd.solvability_det,
                "complete": jd.complete,
                "chains": jd.chains.iter()
                    .map(|c| c.iter().map(vec_json).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            }),
        })
        .collect();
    json!({
        "points": points,
        "jordan": jordan,
        "cond_c": scan.cond_c,
        "cond_c1": scan.cond_c1,
    })
}

fn run_analyze(args: &CommonArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let validation = model::validate(&p, args.samples.max(16));
    let cond_a = conditions::check_condition_a(&p, args.samples)?;
    let plan = if cond_a.holds {
        match conditions::plan_steps(&p, &cond_a) {
            Ok(plan) => {
                json!({"h": plan.h, "epsilon": plan.epsilon, "intervals": plan.intervals.len()})
            }
            Err(e) => json!({"error": e.to_string()}),
        }
    } else {
        Value::Null
    };
    let nstar = {
        let opts = RefineOptions {
            samples: args.samples,
            ..RefineOptions::default()
        };
        match refine::select_n_star(&p, &opts) {
            Ok(rep) => serde_json::to_value(&rep).map_err(Failure::io)?,
            Err(e) => json!({"error": e.to_string()}),
        }
    };
    let charop_section = match charop::build_charop(&p) {
        Ok(op) => {
            let scan = charop::scan(&op, args.n, &ClassifyTol::default())?;
            scan_json(&scan)
        }
        Err(e) => json!({"error": e.to_string()}),
    };

    let base = stem(&args.problem);
    let report = json!({
        "mode": "analyze",
        "problem": args.problem.to_string_lossy(),
        "validation": validation,
        "condition_a": cond_a,
        "plan": plan,
        "n_star": nstar,
        "characteristic": charop_section,
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("wrote {}", path.display());
    if !validation.passed {
        return Err(Failure::new(
            "validation_failed",
            2,
            "problem fails its structural hypotheses; see the report",
        ));
    }
    Ok(())
}

fn run_asympt(args: &CommonArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let validation = model::validate(&p, args.samples.max(16));
    if !validation.passed {
        return Err(Failure::new(
            "validation_failed",
            2,
            "problem fails its structural hypotheses; run `validate` for details",
        ));
    }
    let expansion = asympt::build_expansion(&p, args.n)?;
    let assignment = if args.sets.is_empty() {
        Assignment::new()
    } else {
        parse_assignment(&args.sets[0])?
    };
    let t_hi = (0.01f64).min(p.horizon / 2.0);
    let decay = asympt::measure_residual_decay(&p, &expansion, &assignment, 1e-6, t_hi, 9)?;

    let base = stem(&args.problem);
    let report = json!({
        "mode": "asympt",
        "problem": args.problem.to_string_lossy(),
        "order": args.n,
        "expansion": expansion.to_json(),
        "pretty": expansion.pretty(),
        "residual_decay": {
            "slope": decay.slope,
            "max_norm": decay.max_norm,
            "points": decay.points,
        },
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("{}", expansion.pretty());
    println!("wrote {}", path.display());
    Ok(())
}

fn run_refine(args: &CommonArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let validation = model::validate(&p, args.samples.max(16));
    if !validation.passed {
        return Err(Failure::new(
            "validation_failed",
            2,
            "problem fails its structural hypotheses; run `validate` for details",
        ));
    }
    let n_star_override = parse_nstar(&args.nstar)?;
    let opts = RefineOptions {
        grid: args.grid.min(2048).max(64),
        tol: args.tol,
        samples: args.samples,
        n_star_override,
        ..RefineOptions::default()
    };
    let assignments: Vec<Assignment> = if args.sets.is_empty() {
        vec![Assignment::new()]
    } else {
        args.sets
            .iter()
            .map(|s| parse_assignment(s))
            .collect::<Result<_, _>>()?
    };

    let expansion = asympt::build_expansion(&p, args.n)?;
    let base = stem(&args.problem);
    let multi = assignments.len() > 1;
    let mut solutions = Vec::new();
    let mut csv_names = Vec::new();
    for (idx, assignment) in assignments.iter().enumerate() {
        let sol = refine::full_solution_with_expansion(&p, expansion.clone(), assignment, &opts)?;
        let check = log_points(sol.t_min().max(1e-6), p.horizon, 25);
        let residual = sol.residual_first_kind(&p, &check, 1e-9)?;

        let csv_name = if multi {
            format!("{base}.set{}.csv", idx + 1)
        } else {
            format!("{base}.csv")
        };
        let mut csv = String::new();
        for name in sol.expansion.registry.names() {
            let v = assignment.get(name).copied().unwrap_or(0.0);
            csv.push_str(&format!("# {name}={v}\n"));
        }
        csv.push_str(&sol.solution.to_csv());
        write_out(&args.out, &csv_name, &csv)?;
        csv_names.push(csv_name.clone());

        solutions.push(json!({
            "assignment": assignment,
            "csv": csv_name,
            "n_star": sol.n_star,
            "t_prime": sol.t_prime,
            "residual_first_kind": residual,
            "iterations": sol.meta.iterations,
            "weight_l": sol.meta.weight_l,
        }));
    }
    write_out(
        &args.out,
        &format!("{base}.plt"),
        &gnuplot_script(&csv_names, p.m, &base),
    )?;
    let report = json!({
        "mode": "refine",
        "problem": args.problem.to_string_lossy(),
        "order": args.n,
        "parameters": expansion.registry.names(),
        "pretty": expansion.pretty(),
        "solutions": solutions,
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let p = load_problem(&args.problem)?;
    let text = fs::read_to_string(&args.solution).map_err(Failure::io)?;
    let sol = GridSolution::from_csv(&text)?;
    if sol.dim() != p.m {
        return Err(Failure::new(
            "invalid_solution",
            2,
            format!("solution has {} components, problem has {}", sol.dim(), p.m),
        ));
    }
    let residual = stepper::residual_first_kind(&p, &sol)?;
    let base = format!("{}.verify", stem(&args.solution));
    let report = json!({
        "mode": "verify",
        "problem": args.problem.to_string_lossy(),
        "solution": args.solution.to_string_lossy(),
        "nodes": sol.nodes.len(),
        "max_residual_first_kind": residual,
    });
    let path = write_report(&args.out, &base, &report)?;
    println!("max first-kind residual {residual:.3e}");
    println!("wrote {}", path.display());
    Ok(())
}
