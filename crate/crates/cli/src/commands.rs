//! Command execution.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::Serialize;

use mfg_convex::carleman::{check_carleman_estimate, check_quasi_carleman, lambda_sweep, CarlemanCheckReport};
use mfg_convex::experiments::{build_problem, run_test, RunReport, RunSettings, TestId};
use mfg_convex::io::{self, RunSummary};
use mfg_convex::objective::{check_gradient, random_state_near, GradientCheckReport, Objective};
use mfg_convex::optimizer::{make_start, Status};
use mfg_convex::{Error, Field};

use crate::config::{Command, Overrides};

/// Failure categories, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Param { .. } | Error::Parse(_) | Error::Grid(_) | Error::Shape(_) => Failure::Usage(msg),
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => Failure::Io(msg),
            _ => Failure::Numerical(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Settings and output directory of one invocation, validated before any work.
struct Resolved<'a> {
    settings: RunSettings,
    out: &'a Path,
}

fn resolve<'a>(layers: &'a Overrides, default_test: Option<TestId>) -> Result<Resolved<'a>, Failure> {
    let settings = layers.resolve(default_test).map_err(Failure::Usage)?;
    let out = layers.out_dir().map_err(Failure::Usage)?;
    Ok(Resolved { settings, out })
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

pub fn execute(command: &Command, file: &Overrides) -> Outcome {
    let layers = command.common().over(file);
    match command {
        Command::Run { .. } => {
            let r = resolve(&layers, None)?;
            let report = run_test(&r.settings)?;
            io::write_run(r.out, &report)?;
            print_run(&report);
            converged(&report)
        }
        Command::Sweep { param, values, .. } => sweep(&layers, param, values),
        Command::CheckGradient { states, directions, threshold, .. } => {
            let r = resolve(&layers, Some(TestId::T1_1))?;
            gradient(&r, *states, *directions, *threshold)
        }
        Command::CheckCarleman { samples, lambdas, .. } => {
            let r = resolve(&layers, Some(TestId::T1_1))?;
            carleman(&r, *samples, lambdas)
        }
        Command::ExportCase { .. } => {
            let r = resolve(&layers, None)?;
            let files = io::write_case(r.out, &r.settings)?;
            println!("{}: wrote {} files to {}", r.settings.test, files.len(), r.out.display());
            Ok(())
        }
    }
}

fn print_run(report: &RunReport) {
    let s = &report.summary;
    print!(
        "{}: {:?} after {} iterations, optimality {:.3e}, J = {:.6e}",
        report.settings.test, s.status, s.iterations, s.optimality, s.total
    );
    if let Some(e) = &report.errors {
        print!(", H10 error u {:.4e} m {:.4e}", e.h10_u, e.h10_m);
    }
    if let Some(c) = &report.comparison {
        print!(", companion {:?}, max |log10 ratio| {:.3}", c.status, c.max_log10_ratio);
    }
    println!();
}

fn converged(report: &RunReport) -> Outcome {
    let companion_ok = report.comparison.as_ref().is_none_or(|c| c.status == Status::Converged);
    if report.summary.status == Status::Converged && companion_ok {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("{} did not converge", report.settings.test)))
    }
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    command: &'static str,
    param: &'a str,
    values: &'a [String],
    runs: Vec<SweepRow>,
}

#[derive(Serialize)]
struct SweepRow {
    value: String,
    dir: String,
    settings: RunSettings,
    summary: RunSummary,
}

fn sweep(layers: &Overrides, param: &str, values: &[String]) -> Outcome {
    let base = resolve(layers, None)?;
    if matches!(param, "test" | "out" | "method" | "exec") {
        return Err(Failure::Usage(format!("--param {param} cannot be swept")));
    }
    // every value is resolved before the first run starts
    let mut plans = Vec::new();
    for v in values {
        let one = Overrides::from_pairs([(param, v.as_str())]).map_err(|e| Failure::Usage(e.to_string()))?;
        let settings = one.over(layers).resolve(None).map_err(Failure::Usage)?;
        plans.push((v.clone(), settings));
    }
    create_dir(base.out)?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (v, settings) in plans {
        let name = format!("{param}={v}");
        let report = run_test(&settings)?;
        io::write_run(&base.out.join(&name), &report)?;
        print!("{name}  ");
        print_run(&report);
        if converged(&report).is_err() {
            failed.push(name.clone());
        }
        rows.push(SweepRow { value: v, dir: name, settings, summary: RunSummary::new(&report) });
    }
    let echo = SweepEcho { command: "sweep", param, values, runs: rows };
    io::write_json(&base.out.join("sweep.json"), &echo)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("not converged: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct GradientEcho<'a> {
    command: &'static str,
    settings: &'a RunSettings,
    states: usize,
    directions: usize,
    threshold: f64,
    max_rel_error: f64,
    pass: bool,
    reports: Vec<GradientCheckReport>,
}

/// Random smooth states around the start state; state `k` uses stream `k` of
/// the noise seed and its directions use seed `noise seed + k`.
fn gradient(r: &Resolved, states: usize, directions: usize, threshold: f64) -> Outcome {
    if states == 0 || directions == 0 {
        return Err(Failure::Usage("--states and --directions must be at least 1".into()));
    }
    let s = &r.settings;
    let (spec, _) = build_problem(s)?;
    let obj = Objective::new(&spec, s.params)?;
    let base = make_start(&spec)?;
    let radius = base.norm().max(1.0);
    let mut reports = Vec::with_capacity(states);
    for k in 0..states {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s.noise.seed);
        rng.set_stream(k as u64);
        let state = random_state_near(&base, radius, &mut rng);
        reports.push(check_gradient(&obj, &state, directions, s.noise.seed + k as u64, s.optimizer.exec)?);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = max_rel_error < threshold;
    create_dir(r.out)?;
    let echo = GradientEcho {
        command: "check-gradient",
        settings: s,
        states,
        directions,
        threshold,
        max_rel_error,
        pass,
        reports,
    };
    io::write_json(&r.out.join("gradient_check.json"), &echo)?;
    println!("{}: max relative error {max_rel_error:.3e} over {states} states x {directions} directions", s.test);
    if pass {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed: {max_rel_error:e} >= {threshold:e}")))
    }
}

#[derive(Serialize)]
struct SweepResult {
    threshold: Option<f64>,
    reports: Vec<CarlemanCheckReport>,
}

#[derive(Serialize)]
struct CarlemanEcho<'a> {
    command: &'static str,
    settings: &'a RunSettings,
    samples: usize,
    lambdas: &'a [f64],
    carleman: SweepResult,
    quasi_carleman: SweepResult,
}

/// The quasi check uses `g = r m` with `m` the known solution when the test has
/// one, else the start state.
fn carleman(r: &Resolved, samples: usize, lambdas: &[f64]) -> Outcome {
    let s = &r.settings;
    let grid = s.grid()?;
    let (spec, truth) = build_problem(s)?;
    let m = match &truth {
        Some(c) => c.m_true.clone(),
        None => make_start(&spec)?.m,
    };
    let g = Field::from_values(grid, spec.r.values() * m.values())?;
    let (c, exec, seed) = (s.params.c, s.optimizer.exec, s.noise.seed);
    let (reports, threshold) = lambda_sweep(lambdas, |l| check_carleman_estimate(samples, l, c, &grid, seed, exec))?;
    let carleman = SweepResult { threshold, reports };
    let (reports, threshold) = lambda_sweep(lambdas, |l| check_quasi_carleman(samples, &g, l, c, &grid, seed, exec))?;
    let quasi_carleman = SweepResult { threshold, reports };
    create_dir(r.out)?;
    let mut w = csv::Writer::from_path(r.out.join("carleman.csv")).map_err(|e| Failure::Io(e.to_string()))?;
    for rep in carleman.reports.iter().chain(&quasi_carleman.reports) {
        w.serialize(rep).map_err(|e| Failure::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Io(e.to_string()))?;
    let show = |t: Option<f64>| t.map_or("none".to_string(), |l| l.to_string());
    println!(
        "{}: carleman threshold lambda = {}, quasi threshold lambda = {}",
        s.test,
        show(carleman.threshold),
        show(quasi_carleman.threshold)
    );
    let ok = carleman.threshold.is_some() && quasi_carleman.threshold.is_some();
    let echo = CarlemanEcho { command: "check-carleman", settings: s, samples, lambdas, carleman, quasi_carleman };
    io::write_json(&r.out.join("carleman.json"), &echo)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical("no tested lambda passes both checks".into()))
    }
}
