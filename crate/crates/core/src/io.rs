//! Files written for a run.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.json` | resolved [`RunSettings`] |
//! | `u.csv`, `m.csv` | predicted fields, `x,t,value` |
//! | `u_true.csv`, `m_true.csv` | known solution (manufactured tests only) |
//! | `rel_cost.csv` | `t,value` relative cost per time node |
//! | `rel_cost_companion.csv` | same for the `K = -kernel` run (kernel comparison only) |
//! | `errors.csv` | `t,l2_u,l2_m` per-time relative errors (manufactured tests only) |
//! | `slices.csv` | `x,t,u,m,u_true,m_true` at `t` in {0, 0.6, 1, T} |
//! | `trace.csv` | `iter,j1,j2,j3,total,grad_norm,foo_ratio,step,log_scale,state_norm` per accepted iteration |
//! | `summary.json` | [`RunSummary`] |
//!
//! An exported case holds `config.json`, `data.csv` (`x,u0,m0,u0_clean,m0_clean`)
//! and, for manufactured tests, `u_true.csv`, `m_true.csv`, `f.csv` and
//! `ideal_case.json`.
//!
//! Field values are written with 17 significant digits and every other float
//! in its shortest round-trip form, so reading a file back gives the same bits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{build_problem, ideal_case, nodes_in, realistic_data, RunReport, RunSettings, TraceSummary};
use crate::grid::{Field, Grid};
use crate::model::Kernel;
use crate::optimizer::{IterationTrace, Status};

#[derive(Debug, Deserialize)]
struct FieldRow {
    x: f64,
    t: f64,
    value: f64,
}

/// Writes `x,t,value`, time-major. Values carry 17 significant digits.
pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    let g = field.grid();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "t", "value"])?;
    for j in 0..g.nt {
        for i in 0..g.nx {
            w.write_record([format!("{:?}", g.x(i)), format!("{:?}", g.t(j)), format!("{:.16e}", field.at(i, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_field_csv`] back onto `grid`. Every node
/// must appear exactly once.
pub fn read_field_csv(path: &Path, grid: Grid) -> Result<Field> {
    let mut r = csv::Reader::from_path(path)?;
    let mut values = ndarray::Array2::from_elem(grid.shape(), f64::NAN);
    let mut seen = ndarray::Array2::from_elem(grid.shape(), false);
    let locate = |v: f64, lo: f64, h: f64, n: usize, what: &str| -> Result<usize> {
        let k = ((v - lo) / h).round();
        if k < 0.0 || k >= n as f64 || (lo + k * h - v).abs() > 1e-9 * (1.0 + v.abs()) {
            return Err(Error::Parse(format!("{what} = {v} is not a grid node")));
        }
        Ok(k as usize)
    };
    for row in r.deserialize() {
        let row: FieldRow = row?;
        let i = locate(row.x, grid.x_min, grid.dx, grid.nx, "x")?;
        let j = locate(row.t, 0.0, grid.dt, grid.nt, "t")?;
        if seen[[i, j]] {
            return Err(Error::Parse(format!("node x = {}, t = {} repeated", row.x, row.t)));
        }
        seen[[i, j]] = true;
        values[[i, j]] = row.value;
    }
    if let Some(((i, j), _)) = seen.indexed_iter().find(|(_, s)| !**s) {
        return Err(Error::Parse(format!("node x = {}, t = {} missing", grid.x(i), grid.t(j))));
    }
    Field::from_values(grid, values)
}

/// Writes a two-column `t,value` series.
pub fn write_series_csv(path: &Path, t: &[f64], values: &[f64]) -> Result<()> {
    if t.len() != values.len() {
        return Err(Error::Shape(format!("{} times for {} values", t.len(), values.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "value"])?;
    for (t, v) in t.iter().zip(values) {
        w.serialize((t, v))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TraceRow {
    iter: usize,
    j1: f64,
    j2: f64,
    j3: f64,
    total: f64,
    grad_norm: f64,
    foo_ratio: f64,
    step: f64,
    log_scale: f64,
    state_norm: f64,
}

/// One row per record; `foo_ratio` is the first-order optimality.
pub fn write_trace_csv(path: &Path, trace: &IterationTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &trace.records {
        w.serialize(TraceRow {
            iter: r.iter,
            j1: r.objective.j1,
            j2: r.objective.j2,
            j3: r.objective.j3,
            total: r.objective.total,
            grad_norm: r.grad_norm,
            foo_ratio: r.optimality,
            step: r.step,
            log_scale: r.objective.log_scale,
            state_norm: r.state_norm,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_settings(path: &Path) -> Result<RunSettings> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Statistics of the relative cost curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStats {
    /// Mean over `(0, 0.3)`.
    pub mean_early: Option<f64>,
    /// Min, mean and max over `[0.3, 1]`.
    pub min_mid: Option<f64>,
    pub mean_mid: Option<f64>,
    pub max_mid: Option<f64>,
    /// Max over `(1, T]`.
    pub max_late: Option<f64>,
}

impl CostStats {
    pub fn new(grid: &Grid, curve: &[f64]) -> Self {
        let pick = |idx: Vec<usize>| -> Vec<f64> { idx.into_iter().map(|j| curve[j]).collect() };
        let early = pick((0..grid.nt).filter(|&j| grid.t(j) > 1e-9 && grid.t(j) < 0.3 - 1e-9).collect());
        let mid = pick(nodes_in(grid, 0.3, 1.0));
        let late = pick((0..grid.nt).filter(|&j| grid.t(j) > 1.0 + 1e-9).collect());
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let min = |v: &[f64]| v.iter().cloned().reduce(f64::min);
        let max = |v: &[f64]| v.iter().cloned().reduce(f64::max);
        CostStats {
            mean_early: mean(&early),
            min_mid: min(&mid),
            mean_mid: mean(&mid),
            max_mid: max(&mid),
            max_late: max(&late),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub gamma: f64,
    pub h10_u: f64,
    pub h10_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanionSummary {
    pub kernel: f64,
    pub status: Status,
    pub optimality: f64,
    pub max_log10_ratio: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub test: String,
    pub trace: TraceSummary,
    pub rel_cost: CostStats,
    pub errors: Option<ErrorSummary>,
    pub companion: Option<CompanionSummary>,
}

impl RunSummary {
    pub fn new(report: &RunReport) -> Self {
        RunSummary {
            test: report.settings.test.as_str().into(),
            trace: report.summary.clone(),
            rel_cost: CostStats::new(&report.spec.grid, &report.rel_cost_curve),
            errors: report.errors.as_ref().map(|e| ErrorSummary { gamma: e.gamma, h10_u: e.h10_u, h10_m: e.h10_m }),
            companion: report.comparison.as_ref().map(|c| CompanionSummary {
                kernel: c.kernel,
                status: c.status,
                optimality: c.optimality,
                max_log10_ratio: c.max_log10_ratio,
            }),
        }
    }
}

#[derive(Debug, Serialize)]
struct SliceRow {
    x: f64,
    t: f64,
    u: f64,
    m: f64,
    u_true: Option<f64>,
    m_true: Option<f64>,
}

/// Time nodes nearest to 0, 0.6, 1 and `T`, deduplicated.
fn slice_nodes(grid: &Grid) -> Vec<usize> {
    let mut out: Vec<usize> = [0.0, 0.6, 1.0, grid.t_max]
        .iter()
        .filter(|&&t| t <= grid.t_max + 1e-9)
        .map(|t| ((t / grid.dt).round() as usize).min(grid.nt - 1))
        .collect();
    out.dedup();
    out
}

fn write_slices(path: &Path, report: &RunReport) -> Result<()> {
    let g = report.spec.grid;
    let mut w = csv::Writer::from_path(path)?;
    for j in slice_nodes(&g) {
        for i in 0..g.nx {
            w.serialize(SliceRow {
                x: g.x(i),
                t: g.t(j),
                u: report.predicted.u.at(i, j),
                m: report.predicted.m.at(i, j),
                u_true: report.truth.as_ref().map(|c| c.u_true.at(i, j)),
                m_true: report.truth.as_ref().map(|c| c.m_true.at(i, j)),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes every artifact of `report` into `dir` (created if missing) and
/// returns the paths written.
pub fn write_run(dir: &Path, report: &RunReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let g = report.spec.grid;
    let ts: Vec<f64> = g.ts().to_vec();
    let mut out = Vec::new();
    let mut path = |name: &str| {
        let p = dir.join(name);
        out.push(p.clone());
        p
    };
    write_json(&path("config.json"), &report.settings)?;
    write_field_csv(&path("u.csv"), &report.predicted.u)?;
    write_field_csv(&path("m.csv"), &report.predicted.m)?;
    if let Some(case) = &report.truth {
        write_field_csv(&path("u_true.csv"), &case.u_true)?;
        write_field_csv(&path("m_true.csv"), &case.m_true)?;
    }
    write_series_csv(&path("rel_cost.csv"), &ts, &report.rel_cost_curve)?;
    if let Some(c) = &report.comparison {
        write_series_csv(&path("rel_cost_companion.csv"), &ts, &c.rel_cost_curve)?;
    }
    if let Some(e) = &report.errors {
        let mut w = csv::Writer::from_path(path("errors.csv"))?;
        w.write_record(["t", "l2_u", "l2_m"])?;
        for ((t, u), m) in ts.iter().zip(&e.l2_u).zip(&e.l2_m) {
            w.serialize((t, u, m))?;
        }
        w.flush()?;
    }
    write_slices(&path("slices.csv"), report)?;
    write_trace_csv(&path("trace.csv"), &report.trace)?;
    write_json(&path("summary.json"), &RunSummary::new(report))?;
    Ok(out)
}

/// Scalars of a manufactured case, written as `ideal_case.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealCaseRecord {
    pub provenance: String,
    pub grid: Grid,
    pub residual_l1_norm: f64,
    pub residual_l2_norm: f64,
    pub mismatch_bound: f64,
}

/// Writes the (noisy and clean) initial data of `settings` without running
/// the optimizer.
pub fn write_case(dir: &Path, settings: &RunSettings) -> Result<Vec<PathBuf>> {
    let (noisy, truth) = build_problem(settings)?;
    let g = noisy.grid;
    let (u_clean, m_clean) = match &truth {
        Some(c) => (c.spec.u0.clone(), c.spec.m0.clone()),
        None => realistic_data(settings.test, &g)?,
    };
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut path = |name: &str| {
        let p = dir.join(name);
        out.push(p.clone());
        p
    };
    write_json(&path("config.json"), settings)?;
    let mut w = csv::Writer::from_path(path("data.csv"))?;
    w.write_record(["x", "u0", "m0", "u0_clean", "m0_clean"])?;
    for i in 0..g.nx {
        w.serialize((g.x(i), noisy.u0[i], noisy.m0[i], u_clean[i], m_clean[i]))?;
    }
    w.flush()?;
    if let Some(case) = truth {
        write_field_csv(&path("u_true.csv"), &case.u_true)?;
        write_field_csv(&path("m_true.csv"), &case.m_true)?;
        write_field_csv(&path("f.csv"), &case.f_field)?;
        write_json(
            &path("ideal_case.json"),
            &IdealCaseRecord {
                provenance: case.provenance.clone(),
                grid: g,
                residual_l1_norm: case.residual_l1_norm,
                residual_l2_norm: case.residual_l2_norm,
                mismatch_bound: case.mismatch_bound(),
            },
        )?;
    }
    Ok(out)
}

/// Rebuilds the manufactured case for `settings` from its files: the fields
/// must match a fresh build bit for bit.
pub fn verify_case(dir: &Path, settings: &RunSettings) -> Result<bool> {
    let g = settings.grid()?;
    let case = ideal_case(settings.test, g, Kernel::Constant(settings.kernel))?;
    let u = read_field_csv(&dir.join("u_true.csv"), g)?;
    let m = read_field_csv(&dir.join("m_true.csv"), g)?;
    Ok(u == case.u_true && m == case.m_true)
}
