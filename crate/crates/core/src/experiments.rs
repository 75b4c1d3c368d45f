//! The canned tests: data, noise, the solve, and the diagnostics.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{integrate_x, norm_h10_qgamma};
use crate::carleman::{min_c, ConvexParams};
use crate::error::{param_err, Error, Result};
use crate::grid::{Field, Grid};
use crate::model::{build_ideal_case, residuals, IdealCase, Kernel, ProblemSpec};
use crate::objective::StatePair;
use crate::optimizer::{minimize, IterationTrace, Method, OptimizerConfig, Status};

/// Relative noise on the initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

/// `data_i + level * |data|_2 * r_i` with `r_i` uniform on `[-1, 1]`.
///
/// `stream` separates the draws for different vectors under one seed.
pub fn add_noise(data: &[f64], noise: &NoiseSpec, stream: u64) -> Result<Vec<f64>> {
    if !(noise.level >= 0.0 && noise.level.is_finite()) {
        return param_err("noise", format!("level must be non-negative, got {}", noise.level));
    }
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { context: "noise input".into(), i, j: 0, value: *v });
    }
    if noise.level == 0.0 {
        return Ok(data.to_vec());
    }
    let scale = noise.level * data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(stream);
    Ok(data.iter().map(|v| v + scale * rng.random_range(-1.0..=1.0)).collect())
}

/// `F(t) = sqrt(int (L1^2 + L2^2)(., t) dx / int (u^2 + m^2)(., 0) dx)`, no weight.
pub fn relative_cost_curve(state: &StatePair, spec: &ProblemSpec) -> Result<Vec<f64>> {
    let g = spec.grid;
    if *state.u.grid() != g || *state.m.grid() != g {
        return Err(Error::Shape("state grid differs from problem grid".into()));
    }
    let u0 = state.u.slice_at_time(0)?;
    let m0 = state.m.slice_at_time(0)?;
    let den: Vec<f64> = u0.iter().zip(&m0).map(|(u, m)| u * u + m * m).collect();
    let den = integrate_x(&g, &den)?;
    if !(den > 0.0) {
        return Err(Error::Numerical("relative cost needs nonzero initial data".into()));
    }
    let res = residuals(state.u.values(), state.m.values(), spec);
    (0..g.nt)
        .map(|j| {
            let num: Vec<f64> =
                (0..g.nx).map(|i| res.l1[[i, j]] * res.l1[[i, j]] + res.l2[[i, j]] * res.l2[[i, j]]).collect();
            Ok((integrate_x(&g, &num)? / den).sqrt())
        })
        .collect()
}

/// Recovery errors against a known solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub gamma: f64,
    /// `H^{1,0}(Q_{gamma T})` norm of the error in `u`.
    pub h10_u: f64,
    pub h10_m: f64,
    /// Per time node: `|u - u_true|(t) / |u_true|(t)` in `L2(Omega)` (absolute where the truth vanishes).
    pub l2_u: Vec<f64>,
    pub l2_m: Vec<f64>,
}

pub fn error_vs_truth(pred: &StatePair, truth: &IdealCase, gamma: f64) -> Result<ErrorMetrics> {
    let g = truth.u_true.grid().with_gamma(gamma)?;
    if *pred.u.grid() != *truth.u_true.grid() || *pred.m.grid() != *truth.u_true.grid() {
        return Err(Error::Shape("prediction and truth are on different grids".into()));
    }
    let diff = |a: &Field, b: &Field| Field::from_values(g, a.values() - b.values());
    let du = diff(&pred.u, &truth.u_true)?;
    let dm = diff(&pred.m, &truth.m_true)?;
    let curve = |d: &Field, t: &Field| -> Result<Vec<f64>> {
        (0..g.nt)
            .map(|j| {
                let e: Vec<f64> = d.slice_at_time(j)?.iter().map(|v| v * v).collect();
                let r: Vec<f64> = t.slice_at_time(j)?.iter().map(|v| v * v).collect();
                let (e, r) = (integrate_x(&g, &e)?.sqrt(), integrate_x(&g, &r)?.sqrt());
                Ok(if r > 0.0 { e / r } else { e })
            })
            .collect()
    };
    Ok(ErrorMetrics {
        gamma,
        h10_u: norm_h10_qgamma(&du),
        h10_m: norm_h10_qgamma(&dm),
        l2_u: curve(&du, &truth.u_true)?,
        l2_m: curve(&dm, &truth.m_true)?,
    })
}

/// The canned tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestId {
    #[serde(rename = "T1_1")]
    T1_1,
    #[serde(rename = "T1_2")]
    T1_2,
    #[serde(rename = "T2_1")]
    T2_1,
    #[serde(rename = "T2_2")]
    T2_2,
    #[serde(rename = "T3_1")]
    T3_1,
    #[serde(rename = "T1_1_extended")]
    T1_1Extended,
    #[serde(rename = "kernel_compare")]
    KernelCompare,
}

impl TestId {
    pub const ALL: [TestId; 7] = [
        TestId::T1_1,
        TestId::T1_2,
        TestId::T2_1,
        TestId::T2_2,
        TestId::T3_1,
        TestId::T1_1Extended,
        TestId::KernelCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TestId::T1_1 => "T1_1",
            TestId::T1_2 => "T1_2",
            TestId::T2_1 => "T2_1",
            TestId::T2_2 => "T2_2",
            TestId::T3_1 => "T3_1",
            TestId::T1_1Extended => "T1_1_extended",
            TestId::KernelCompare => "kernel_compare",
        }
    }

    /// Known solution available (manufactured source).
    pub fn is_ideal(self) -> bool {
        matches!(self, TestId::T1_1 | TestId::T1_2 | TestId::T1_1Extended)
    }

    pub fn default_seed(self) -> u64 {
        match self {
            TestId::T1_1 => 1101,
            TestId::T1_2 => 1201,
            TestId::T2_1 => 2101,
            TestId::T2_2 => 2201,
            TestId::T3_1 => 3101,
            TestId::T1_1Extended => 1111,
            TestId::KernelCompare => 2202,
        }
    }

    pub fn default_t_max(self) -> f64 {
        if self == TestId::T1_1Extended {
            2.0
        } else {
            1.0
        }
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown test id `{s}`")))
    }
}

/// Compactly supported bump `scale * exp(-r^2 / (r^2 - (x - x0)^2))`, zero on
/// and outside the support edge. With `r = 0.4` and `scale = 5.57` it has unit mass.
pub fn bump(x: f64, x0: f64, radius: f64, scale: f64) -> f64 {
    let d2 = (x - x0) * (x - x0);
    let r2 = radius * radius;
    if d2 < r2 {
        scale * (-r2 / (r2 - d2)).exp()
    } else {
        0.0
    }
}

/// `exp(-1 / x^2)` for `x > 0`, else 0.
fn tau(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / (x * x)).exp()
    } else {
        0.0
    }
}

/// Smooth step from -0.5 at `x = -1` to 0.5 at `x = 1`.
pub fn smooth_transition(x: f64) -> f64 {
    let a = tau((1.0 + x) / 2.0);
    let b = tau((1.0 - x) / 2.0);
    if a + b == 0.0 {
        // only reachable outside [-1, 1]
        return if x > 0.0 { 0.5 } else { -0.5 };
    }
    a / (a + b) - 0.5
}

fn t1_1_u(x: f64, t: f64) -> f64 {
    (x * x - 1.0).powi(2) * (t * t + 1.0)
}

fn t1_1_m0(x: f64) -> f64 {
    if x.abs() < 1.0 {
        (1.0 / (x * x - 1.0)).exp() + 0.28
    } else {
        0.28
    }
}

fn t1_2_u(x: f64, t: f64) -> f64 {
    0.1 * (2.0 * std::f64::consts::PI * x).cos() * (t + 1.0)
}

type Profile = fn(f64) -> f64;

/// Clean initial data of a realistic test on `grid`.
pub fn realistic_data(test: TestId, grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs = grid.xs();
    let (u, m): (Profile, Profile) = match test {
        TestId::T2_1 => (|x| (x * x - 1.0).powi(2), |x| bump(x, 0.0, 0.4, 5.57)),
        TestId::T2_2 | TestId::KernelCompare => (|x| (2.0 * std::f64::consts::PI * x).cos(), |_| 0.5),
        TestId::T3_1 => (smooth_transition, |x| bump(x, 0.5, 0.4, 5.57)),
        _ => return Err(Error::Parse(format!("{test} has a manufactured solution, not fixed data"))),
    };
    Ok((xs.iter().map(|&x| u(x)).collect(), xs.iter().map(|&x| m(x)).collect()))
}

/// Manufactured case of an ideal test on `grid`.
pub fn ideal_case(test: TestId, grid: Grid, kernel: Kernel) -> Result<IdealCase> {
    let mut case = match test {
        TestId::T1_1 | TestId::T1_1Extended => build_ideal_case(t1_1_u, t1_1_m0, kernel, grid)?,
        TestId::T1_2 => build_ideal_case(t1_2_u, |_| 0.5, kernel, grid)?,
        _ => return Err(Error::Parse(format!("{test} has no manufactured solution"))),
    };
    case.provenance = test.as_str().into();
    Ok(case)
}

/// Fully resolved configuration of one run. Serialized next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub test: TestId,
    pub params: ConvexParams,
    pub dx: f64,
    pub dt: f64,
    pub noise: NoiseSpec,
    /// `K(x, y)` is this constant.
    pub kernel: f64,
    pub optimizer: OptimizerConfig,
}

impl RunSettings {
    /// `lambda = 2, c = 3, a = 1.1, alpha = 1e-5, d = 1`, step 0.1, 3% noise,
    /// `K = 1`, Newton directions. `c` is raised for horizons that need it.
    pub fn standard(test: TestId) -> Result<Self> {
        Ok(RunSettings {
            test,
            params: ConvexParams::standard(test.default_t_max())?,
            dx: 0.1,
            dt: 0.1,
            noise: NoiseSpec { level: 0.03, seed: test.default_seed() },
            kernel: 1.0,
            optimizer: OptimizerConfig { method: Method::Newton, ..Default::default() },
        })
    }

    /// Changes the horizon and raises `c` to the admissible minimum if needed.
    pub fn with_t_max(mut self, t_max: f64) -> Result<Self> {
        self.params.t_max = t_max;
        self.params.c = self.params.c.max(min_c(t_max)?);
        Ok(self)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(-1.0, 1.0, self.params.t_max, self.dx, self.dt, self.params.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.optimizer.validate()?;
        self.grid()?;
        if !(self.noise.level >= 0.0 && self.noise.level.is_finite()) {
            return param_err("noise", format!("level must be non-negative, got {}", self.noise.level));
        }
        if !self.kernel.is_finite() {
            return param_err("kernel", "must be finite");
        }
        Ok(())
    }
}

/// Final state of the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub status: Status,
    pub iterations: usize,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub total: f64,
    pub log_scale: f64,
    pub optimality: f64,
    pub state_norm: f64,
    /// `Some(true)` when the state stayed inside the configured ball.
    pub inside_ball: Option<bool>,
    pub alpha_below_floor: bool,
    pub diagnostic: Option<String>,
}

/// The `K = -1` companion run of a kernel comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelComparison {
    pub kernel: f64,
    pub status: Status,
    pub optimality: f64,
    pub rel_cost_curve: Vec<f64>,
    /// `max_t |log10(F_primary(t) / F_companion(t))|` over `t` in `[0.3, 1]`.
    pub max_log10_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub settings: RunSettings,
    /// Problem actually solved (noisy data pinned).
    pub spec: ProblemSpec,
    pub predicted: StatePair,
    pub truth: Option<IdealCase>,
    pub rel_cost_curve: Vec<f64>,
    pub errors: Option<ErrorMetrics>,
    pub trace: IterationTrace,
    pub summary: TraceSummary,
    pub comparison: Option<KernelComparison>,
}

/// Problem for `settings`: the clean spec, the noisy spec, and the truth if any.
pub fn build_problem(settings: &RunSettings) -> Result<(ProblemSpec, Option<IdealCase>)> {
    settings.validate()?;
    let grid = settings.grid()?;
    let kernel = Kernel::Constant(settings.kernel);
    let (clean, truth) = if settings.test.is_ideal() {
        let case = ideal_case(settings.test, grid, kernel)?;
        (case.spec.clone(), Some(case))
    } else {
        let (u0, m0) = realistic_data(settings.test, &grid)?;
        (ProblemSpec::realistic(grid, kernel, u0, m0)?, None)
    };
    let mut noisy = clean;
    noisy.u0 = add_noise(&noisy.u0, &settings.noise, 0)?;
    noisy.m0 = add_noise(&noisy.m0, &settings.noise, 1)?;
    noisy.validate()?;
    Ok((noisy, truth))
}

fn solve(settings: &RunSettings) -> Result<RunReport> {
    let (spec, truth) = build_problem(settings)?;
    let out = minimize(&spec, &settings.params, &settings.optimizer)?;
    let rel_cost_curve = relative_cost_curve(&out.state, &spec)?;
    let errors = match &truth {
        Some(t) => Some(error_vs_truth(&out.state, t, settings.params.gamma)?),
        None => None,
    };
    let last = *out.trace.last().expect("trace holds the start record");
    let summary = TraceSummary {
        status: out.status,
        iterations: last.iter,
        j1: last.objective.j1,
        j2: last.objective.j2,
        j3: last.objective.j3,
        total: last.objective.total,
        log_scale: last.objective.log_scale,
        optimality: last.optimality,
        state_norm: last.state_norm,
        inside_ball: settings.params.radius.map(|r| last.state_norm < r),
        alpha_below_floor: settings.params.alpha_below_floor(),
        diagnostic: out.diagnostic.clone(),
    };
    Ok(RunReport {
        settings: settings.clone(),
        spec,
        predicted: out.state,
        truth,
        rel_cost_curve,
        errors,
        trace: out.trace,
        summary,
        comparison: None,
    })
}

/// Indices of time nodes in `[lo, hi]`.
pub fn nodes_in(grid: &Grid, lo: f64, hi: f64) -> Vec<usize> {
    (0..grid.nt).filter(|&j| grid.t(j) >= lo - 1e-9 && grid.t(j) <= hi + 1e-9).collect()
}

/// Runs one canned test.
pub fn run_test(settings: &RunSettings) -> Result<RunReport> {
    let mut report = solve(settings)?;
    if settings.test == TestId::KernelCompare {
        let other = RunSettings { kernel: -settings.kernel, ..settings.clone() };
        let companion = solve(&other)?;
        let grid = settings.grid()?;
        let max_log10_ratio = nodes_in(&grid, 0.3, 1.0)
            .into_iter()
            .map(|j| (report.rel_cost_curve[j] / companion.rel_cost_curve[j]).log10().abs())
            .fold(0.0, f64::max);
        report.comparison = Some(KernelComparison {
            kernel: other.kernel,
            status: companion.summary.status,
            optimality: companion.summary.optimality,
            rel_cost_curve: companion.rel_cost_curve,
            max_log10_ratio,
        });
    }
    Ok(report)
}
