//! Projected gradient descent with Armijo backtracking.
//!
//! Iterates `s <- project(s - xi grad J(s))` where `project` restores the pinned
//! `t = 0` plane. Stops on the first-order optimality ratio
//! `|proj grad J(s)| / |grad J(s_start)|`. Quasi-Newton and Newton directions
//! share the same line search and projection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::carleman::ConvexParams;
use crate::error::{param_err, Error, Result};
use crate::exec::Exec;
use crate::grid::Field;
use crate::model::ProblemSpec;
use crate::objective::{first_order_optimality, Objective, ObjectiveBreakdown, StatePair};

/// Search direction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Steepest descent, the reference path.
    GradientDescent,
    /// Limited-memory BFGS direction with the same line search and projection.
    Lbfgs { memory: usize },
    /// Newton direction from the exact dense Hessian over the unpinned
    /// unknowns, with Levenberg-style diagonal damping whenever the Hessian
    /// is not positive definite.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step0: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Reserved for randomized tie-breaking; unused by the built-in methods.
    pub seed: u64,
    pub method: Method,
    /// How the Newton Hessian columns are computed.
    #[serde(default)]
    pub exec: Exec,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step0: 1.0,
            tol: 1e-5,
            max_iters: 20_000,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 60,
            seed: 0,
            method: Method::GradientDescent,
            exec: Exec::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return param_err("step0", format!("must be positive, got {}", self.step0));
        }
        if !(self.tol > 0.0) {
            return param_err("tol", format!("must be positive, got {}", self.tol));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return param_err("armijo_c", format!("must lie in (0, 1), got {}", self.armijo_c));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return param_err("backtrack_factor", format!("must lie in (0, 1), got {}", self.backtrack_factor));
        }
        if self.max_iters == 0 {
            return param_err("max_iters", "must be at least 1");
        }
        if self.max_backtracks == 0 {
            return param_err("max_backtracks", "must be at least 1");
        }
        if let Method::Lbfgs { memory } = self.method {
            if memory == 0 {
                return param_err("memory", "must be at least 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    Budget,
    Stalled,
}

/// One accepted iteration (`iter = 0` is the start state, with `step = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: ObjectiveBreakdown,
    pub grad_norm: f64,
    pub optimality: f64,
    pub step: f64,
    pub state_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct Minimization {
    pub state: StatePair,
    pub trace: IterationTrace,
    pub status: Status,
    /// Set when the run stalled.
    pub diagnostic: Option<String>,
}

/// Constant-in-time extension of the initial data.
pub fn make_start(spec: &ProblemSpec) -> Result<StatePair> {
    StatePair::new(Field::extend_in_time(spec.grid, &spec.u0)?, Field::extend_in_time(spec.grid, &spec.m0)?)
}

/// Resets the `t = 0` plane to the data; every other entry is untouched.
pub fn project(state: &StatePair, spec: &ProblemSpec) -> Result<StatePair> {
    if *state.u.grid() != spec.grid || *state.m.grid() != spec.grid {
        return Err(Error::Shape("state grid differs from problem grid".into()));
    }
    let mut out = state.clone();
    for (field, data) in [(&mut out.u, &spec.u0), (&mut out.m, &spec.m0)] {
        for (v, d) in field.values_mut().column_mut(0).iter_mut().zip(data) {
            *v = *d;
        }
    }
    Ok(out)
}

/// Two-loop recursion on the stored pairs; returns `H grad`.
fn lbfgs_direction(grad: &StatePair, pairs: &VecDeque<(StatePair, StatePair, f64)>) -> StatePair {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q = q.axpy(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q = q.axpy(s.dot(y) / y.dot(y) - 1.0, &q);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q = q.axpy(a - b, s);
    }
    q
}

/// Solves `(H + mu I) d = grad`, raising `mu` until the Cholesky factorization exists.
fn newton_direction(
    obj: &Objective,
    s: &StatePair,
    grad: &StatePair,
    damping: &mut f64,
    exec: Exec,
) -> Result<StatePair> {
    let h = obj.hessian_matrix(s, exec)?;
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let floor = 1e-14 * scale;
    if *damping < floor {
        *damping = 0.0;
    }
    let g = nalgebra::DVector::from_vec(obj.free_vector(grad));
    for _ in 0..60 {
        let mut shifted = h.clone();
        for i in 0..n {
            shifted[(i, i)] += *damping;
        }
        if let Some(chol) = shifted.cholesky() {
            let d = chol.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(obj.from_free(d.as_slice()));
            }
        }
        *damping = (*damping * 10.0).max(floor);
    }
    Err(Error::Numerical("Hessian could not be made positive definite".into()))
}

fn record(
    iter: usize,
    objective: ObjectiveBreakdown,
    grad: &StatePair,
    grad0: f64,
    step: f64,
    s: &StatePair,
) -> IterationRecord {
    let grad_norm = grad.norm();
    IterationRecord {
        iter,
        objective,
        grad_norm,
        optimality: if grad0 > 0.0 { grad_norm / grad0 } else { 0.0 },
        step,
        state_norm: s.norm(),
    }
}

/// Minimizes the functional from [`make_start`].
pub fn minimize(spec: &ProblemSpec, params: &ConvexParams, config: &OptimizerConfig) -> Result<Minimization> {
    minimize_from(make_start(spec)?, spec, params, config)
}

/// Minimizes the functional from a given start (projected first).
pub fn minimize_from(
    start: StatePair,
    spec: &ProblemSpec,
    params: &ConvexParams,
    config: &OptimizerConfig,
) -> Result<Minimization> {
    config.validate()?;
    let obj = Objective::new(spec, *params)?;
    minimize_objective(&obj, start, config)
}

/// Minimizes an already-built objective.
pub fn minimize_objective(obj: &Objective, start: StatePair, config: &OptimizerConfig) -> Result<Minimization> {
    config.validate()?;
    let spec = obj.spec();
    let mut s = project(&start, spec)?;
    let mut val = obj.eval(&s)?;
    let mut grad = obj.gradient(&s)?;
    let grad_start = obj.gradient_unmasked(&s)?;
    let grad0 = grad_start.norm();
    let mut trace = IterationTrace { records: vec![record(0, val, &grad, grad0, 0.0, &s)] };
    if grad.norm() == 0.0 || grad0 == 0.0 {
        return Ok(Minimization { state: s, trace, status: Status::Converged, diagnostic: None });
    }
    let mut pairs: VecDeque<(StatePair, StatePair, f64)> = VecDeque::new();
    let mut damping = 0.0;

    for iter in 1..=config.max_iters {
        let mut dir = match config.method {
            Method::GradientDescent => grad.clone(),
            Method::Lbfgs { .. } => lbfgs_direction(&grad, &pairs),
            Method::Newton => newton_direction(obj, &s, &grad, &mut damping, config.exec)?,
        };
        let mut slope = grad.dot(&dir);
        if !(slope > 0.0) {
            // not a descent direction: drop the curvature memory
            pairs.clear();
            dir = grad.clone();
            slope = grad.dot(&dir);
        }
        let mut step = config.step0;
        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let trial = project(&s.axpy(-step, &dir), spec)?;
            if let Ok(tv) = obj.eval(&trial) {
                if tv.total <= val.total - config.armijo_c * step * slope {
                    accepted = Some((trial, tv));
                    break;
                }
            }
            step *= config.backtrack_factor;
        }
        let Some((next, next_val)) = accepted else {
            return Ok(Minimization {
                state: s,
                trace,
                status: Status::Stalled,
                diagnostic: Some(format!(
                    "no sufficient decrease after {} backtracks at iteration {iter} (directional slope {slope:.3e}); \
                     objective and gradient may be inconsistent",
                    config.max_backtracks
                )),
            });
        };
        if config.method == Method::Newton {
            damping = if step == config.step0 { damping * 0.1 } else { damping * 10.0 };
        }
        let next_grad = obj.gradient(&next)?;
        if let Method::Lbfgs { memory } = config.method {
            let sv = next.sub(&s);
            let yv = next_grad.sub(&grad);
            let sy = sv.dot(&yv);
            if sy > 1e-12 * sv.norm() * yv.norm() {
                if pairs.len() == memory {
                    pairs.pop_front();
                }
                pairs.push_back((sv, yv, 1.0 / sy));
            }
        }
        s = next;
        val = next_val;
        grad = next_grad;
        let rec = record(iter, val, &grad, grad0, step, &s);
        trace.records.push(rec);
        if first_order_optimality(&grad, &grad_start)? < config.tol {
            return Ok(Minimization { state: s, trace, status: Status::Converged, diagnostic: None });
        }
    }
    Ok(Minimization { state: s, trace, status: Status::Budget, diagnostic: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::Kernel;

    fn spec() -> ProblemSpec {
        let g = Grid::standard(1.0).unwrap();
        let u0: Vec<f64> = g.xs().iter().map(|x| (x * x - 1.0).powi(2)).collect();
        ProblemSpec::realistic(g, Kernel::Constant(1.0), u0, vec![0.5; g.nx]).unwrap()
    }

    #[test]
    fn start_is_constant_in_time_and_feasible() {
        let sp = spec();
        let s = make_start(&sp).unwrap();
        for j in 0..sp.grid.nt {
            assert_eq!(s.u.slice_at_time(j).unwrap(), sp.u0);
            assert_eq!(s.m.slice_at_time(j).unwrap(), sp.m0);
        }
        assert_eq!(project(&s, &sp).unwrap(), s);
        let zero = ProblemSpec::realistic(sp.grid, Kernel::Constant(1.0), vec![0.0; 21], vec![0.5; 21]).unwrap();
        let z = make_start(&zero).unwrap();
        assert!(z.u.values().iter().all(|&v| v == 0.0));
        assert!(z.m.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn project_restores_only_the_initial_plane() {
        let sp = spec();
        let s = make_start(&sp).unwrap();
        let bumped = s.axpy(1.0, &s);
        let p = project(&bumped, &sp).unwrap();
        assert_eq!(p.u.slice_at_time(0).unwrap(), sp.u0);
        assert_eq!(p.u.slice_at_time(3).unwrap(), bumped.u.slice_at_time(3).unwrap());
        assert_eq!(project(&p, &sp).unwrap(), p);
    }

    #[test]
    fn config_validation() {
        let ok = OptimizerConfig::default();
        ok.validate().unwrap();
        for bad in [
            OptimizerConfig { step0: 0.0, ..ok },
            OptimizerConfig { tol: 0.0, ..ok },
            OptimizerConfig { armijo_c: 1.0, ..ok },
            OptimizerConfig { backtrack_factor: 1.0, ..ok },
            OptimizerConfig { max_iters: 0, ..ok },
            OptimizerConfig { method: Method::Lbfgs { memory: 0 }, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let g = Grid::standard(1.0).unwrap();
        let sp = ProblemSpec::realistic(g, Kernel::Constant(1.0), vec![0.0; 21], vec![0.0; 21]).unwrap();
        let out = minimize(&sp, &ConvexParams::standard(1.0).unwrap(), &OptimizerConfig::default()).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert!(out.trace.records.len() <= 2);
    }

    #[test]
    fn descent_is_monotone_and_feasible() {
        let sp = spec();
        let cfg = OptimizerConfig { max_iters: 50, ..Default::default() };
        let out = minimize(&sp, &ConvexParams::standard(1.0).unwrap(), &cfg).unwrap();
        let totals: Vec<f64> = out.trace.records.iter().map(|r| r.objective.total).collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(out.state.u.slice_at_time(0).unwrap(), sp.u0);
        assert_eq!(out.state.m.slice_at_time(0).unwrap(), sp.m0);
    }

    fn quadratic() -> (ProblemSpec, ConvexParams) {
        (spec(), ConvexParams::standard(1.0).unwrap())
    }

    #[test]
    fn newton_solves_the_quadratic_in_one_step() {
        let (sp, p) = quadratic();
        let obj = Objective::regularization_only(&sp, p).unwrap();
        let cfg = OptimizerConfig { method: Method::Newton, tol: 1e-9, ..Default::default() };
        let out = minimize_objective(&obj, make_start(&sp).unwrap(), &cfg).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert_eq!(out.trace.records.len(), 2);
        assert_eq!(out.trace.records[1].step, 1.0);
    }

    #[test]
    fn gradient_descent_rate_on_an_eigendirection() {
        let (sp, p) = quadratic();
        let obj = Objective::regularization_only(&sp, p).unwrap();
        let newton = OptimizerConfig { method: Method::Newton, tol: 1e-12, ..Default::default() };
        let best = minimize_objective(&obj, make_start(&sp).unwrap(), &newton).unwrap().state;
        let eig = obj.hessian_matrix(&best, Exec::Sequential).unwrap().symmetric_eigen();
        let k = eig.eigenvalues.imax();
        let top = eig.eigenvalues[k];
        let v = obj.from_free(eig.eigenvectors.column(k).as_slice());
        let start = best.axpy(0.1, &v);
        let cfg = OptimizerConfig { max_iters: 40, tol: 1e-300, ..Default::default() };
        let out = minimize_objective(&obj, start, &cfg).unwrap();
        let r = &out.trace.records;
        assert!(r[1..].iter().all(|x| x.step == 1.0));
        let ratios: Vec<f64> = r.windows(2).map(|w| w[1].grad_norm / w[0].grad_norm).collect();
        let expected = 1.0 - top;
        let tail = &ratios[5..];
        assert!(tail.iter().all(|q| (q - tail[0]).abs() < 0.01 * tail[0]), "{tail:?}");
        assert!(((1.0 - tail[0]) - top).abs() < 0.1 * top, "{} vs {expected}", tail[0]);
    }

    #[test]
    fn lbfgs_beats_steepest_descent_on_a_budget() {
        let sp = spec();
        let p = ConvexParams::standard(1.0).unwrap();
        let run = |method| {
            let cfg = OptimizerConfig { method, max_iters: 60, ..Default::default() };
            minimize(&sp, &p, &cfg).unwrap().trace.last().unwrap().objective.total
        };
        let gd = run(Method::GradientDescent);
        let lb = run(Method::Lbfgs { memory: 8 });
        assert!(lb < gd, "{lb} vs {gd}");
    }

    #[test]
    fn newton_matches_across_execution_modes() {
        let sp = spec();
        let p = ConvexParams::standard(1.0).unwrap();
        let cfg = |exec| OptimizerConfig { method: Method::Newton, exec, ..Default::default() };
        let a = minimize(&sp, &p, &cfg(Exec::Sequential)).unwrap();
        let b = minimize(&sp, &p, &cfg(Exec::Parallel)).unwrap();
        assert_eq!(a.status, Status::Converged);
        assert_eq!(a.state, b.state);
        assert_eq!(a.trace, b.trace);
    }
}
