//! The weighted functional
//!
//! ```text
//! J(u, m) = e^{-2 a c^l} int [L1^2 + q d L2^2] phi^2 + alpha (|u|_H2^2 + |m|_H2^2)
//! ```
//!
//! evaluated with trapezoid quadrature, and its exact discrete gradient.
//!
//! When `max_t log(balance * phi^2)` passes [`MAX_LOG_WEIGHT`] every term is
//! divided by `exp(log_scale)` so the weights stay finite; minimizers do not
//! change, and the breakdown reports `log_scale` so true values can be
//! recovered.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{h2_squared, h2_squared_gradient, stencil};
use crate::carleman::ConvexParams;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::grid::{check_finite, Field};
use crate::model::{residuals, ProblemSpec};

/// Largest log weight kept unscaled.
pub const MAX_LOG_WEIGHT: f64 = 600.0;

/// A candidate pair `(u, m)`. The `t = 0` plane of both fields is pinned to the data.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePair {
    pub u: Field,
    pub m: Field,
}

impl StatePair {
    pub fn new(u: Field, m: Field) -> Result<Self> {
        u.same_grid(&m, "u/m")?;
        Ok(StatePair { u, m })
    }

    /// `true` on pinned nodes (the whole `t = 0` column).
    pub fn constraint_mask(&self) -> Array2<bool> {
        let (nx, nt) = self.u.grid().shape();
        Array2::from_shape_fn((nx, nt), |(_, j)| j == 0)
    }

    /// Euclidean norm over both fields.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Euclidean inner product over both fields.
    pub fn dot(&self, other: &StatePair) -> f64 {
        (self.u.values() * other.u.values()).sum() + (self.m.values() * other.m.values()).sum()
    }

    /// Sum of discrete H^2 norms squared of both fields.
    pub fn h2_squared(&self) -> f64 {
        let g = self.u.grid();
        let w = g.space_time_weights();
        h2_squared(self.u.values(), g, &w) + h2_squared(self.m.values(), g, &w)
    }

    /// `self + s * dir`.
    pub fn axpy(&self, s: f64, dir: &StatePair) -> StatePair {
        let g = *self.u.grid();
        StatePair {
            u: Field::from_raw(g, self.u.values() + &(dir.u.values() * s)),
            m: Field::from_raw(g, self.m.values() + &(dir.m.values() * s)),
        }
    }

    pub fn sub(&self, other: &StatePair) -> StatePair {
        self.axpy(-1.0, other)
    }

    fn same_shape(&self, other: &StatePair) -> Result<()> {
        self.u.same_grid(&other.u, "state pair")
    }
}

/// Parts of the functional, all scaled by `exp(-log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub total: f64,
    pub log_scale: f64,
}

/// The functional bound to one problem and one parameter set.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    spec: &'a ProblemSpec,
    params: ConvexParams,
    /// Quadrature weight times `balance * phi^2 * exp(-log_scale)`.
    weights: Array2<f64>,
    /// Plain quadrature weights, used by the H^2 term.
    quad: Array2<f64>,
    qd: f64,
    alpha: f64,
    log_scale: f64,
}

impl<'a> Objective<'a> {
    pub fn new(spec: &'a ProblemSpec, params: ConvexParams) -> Result<Self> {
        params.validate()?;
        let g = spec.grid;
        if (params.t_max - g.t_max).abs() > 1e-12 {
            return Err(Error::Param {
                name: "T",
                reason: format!("parameters use T = {}, grid has T = {}", params.t_max, g.t_max),
            });
        }
        let lw: Vec<f64> = (0..g.nt).map(|j| params.log_weight(g.t(j))).collect();
        let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_scale = (top - MAX_LOG_WEIGHT).max(0.0);
        let quad = g.space_time_weights();
        let weights = Array2::from_shape_fn(g.shape(), |(i, j)| quad[[i, j]] * (lw[j] - log_scale).exp());
        Ok(Objective {
            spec,
            params,
            weights,
            quad,
            qd: params.q() * params.d,
            alpha: params.alpha * (-log_scale).exp(),
            log_scale,
        })
    }

    /// Keeps only the regularization term, as if `balance` were 0.
    pub fn regularization_only(spec: &'a ProblemSpec, params: ConvexParams) -> Result<Self> {
        let mut obj = Self::new(spec, params)?;
        obj.weights.fill(0.0);
        obj.alpha = params.alpha;
        obj.log_scale = 0.0;
        Ok(obj)
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    pub fn params(&self) -> &ConvexParams {
        &self.params
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    /// `alpha` in the scaled units of the breakdown.
    pub fn scaled_alpha(&self) -> f64 {
        self.alpha
    }

    fn check_state(&self, s: &StatePair) -> Result<()> {
        if *s.u.grid() != self.spec.grid || *s.m.grid() != self.spec.grid {
            return Err(Error::Shape("state grid differs from problem grid".into()));
        }
        check_finite(s.u.values(), "u")?;
        check_finite(s.m.values(), "m")
    }

    pub fn eval(&self, s: &StatePair) -> Result<ObjectiveBreakdown> {
        self.check_state(s)?;
        let g = &self.spec.grid;
        let res = residuals(s.u.values(), s.m.values(), self.spec);
        check_finite(&res.l1, "residual_l1")?;
        check_finite(&res.l2, "residual_l2")?;
        let mut j1 = 0.0;
        let mut j2 = 0.0;
        Zip::from(&self.weights).and(&res.l1).and(&res.l2).for_each(|&w, &a, &b| {
            j1 += w * a * a;
            j2 += w * b * b;
        });
        j2 *= self.qd;
        let j3 = self.alpha * (h2_squared(s.u.values(), g, &self.quad) + h2_squared(s.m.values(), g, &self.quad));
        let out = ObjectiveBreakdown { j1, j2, j3, total: j1 + j2 + j3, log_scale: self.log_scale };
        for (name, v) in [("j1", j1), ("j2", j2), ("j3", j3)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("objective term {name} is not finite")));
            }
        }
        Ok(out)
    }

    /// Transpose of the residual linearization at `(ux, m)` applied to the
    /// residual cotangents `a` (first equation) and `b` (second).
    fn backprop(
        &self,
        a: &Array2<f64>,
        b: &Array2<f64>,
        ux: &Array2<f64>,
        m: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let spec = self.spec;
        let g = &spec.grid;
        let r = spec.r.values();

        let mut du = stencil::d_dt_adjoint(a.view(), g.dt);
        du += &stencil::d2_dx2_adjoint(a.view(), g.dx);
        let mut dm = spec.kernel.apply_adjoint(a.view(), g);
        dm += &(spec.f.values() * a);

        dm += &stencil::d_dt_adjoint(b.view(), g.dt);
        dm -= &stencil::d2_dx2_adjoint(b.view(), g.dx);
        let back = stencil::div_flux_adjoint(b.view(), g.dx);

        // everything reached through u_x
        let through_ux =
            Array2::from_shape_fn(g.shape(), |idx| -r[idx] * ux[idx] * a[idx] - r[idx] * m[idx] * back[idx]);
        du += &stencil::d_dx_adjoint(through_ux.view(), g.dx);
        Zip::from(&mut dm).and(r).and(ux).and(&back).for_each(|d, &r, &p, &q| *d -= r * p * q);
        (du, dm)
    }

    fn finish(&self, mut du: Array2<f64>, mut dm: Array2<f64>) -> Result<StatePair> {
        du.column_mut(0).fill(0.0);
        dm.column_mut(0).fill(0.0);
        self.wrap(du, dm)
    }

    fn wrap(&self, du: Array2<f64>, dm: Array2<f64>) -> Result<StatePair> {
        let g = self.spec.grid;
        check_finite(&du, "gradient u")?;
        check_finite(&dm, "gradient m")?;
        Ok(StatePair { u: Field::from_raw(g, du), m: Field::from_raw(g, dm) })
    }

    /// Exact gradient of [`Objective::eval`]'s total, zero on pinned nodes.
    pub fn gradient(&self, s: &StatePair) -> Result<StatePair> {
        let (du, dm) = self.raw_gradient(s)?;
        self.finish(du, dm)
    }

    /// Gradient including the pinned plane (the denominator of the optimality ratio).
    pub fn gradient_unmasked(&self, s: &StatePair) -> Result<StatePair> {
        let (du, dm) = self.raw_gradient(s)?;
        self.wrap(du, dm)
    }

    fn raw_gradient(&self, s: &StatePair) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_state(s)?;
        let g = &self.spec.grid;
        let (u, m) = (s.u.values(), s.m.values());
        let res = residuals(u, m, self.spec);
        check_finite(&res.l1, "residual_l1")?;
        check_finite(&res.l2, "residual_l2")?;
        let a = 2.0 * &self.weights * &res.l1;
        let b = (2.0 * self.qd) * &self.weights * &res.l2;
        let (mut du, mut dm) = self.backprop(&a, &b, &res.ux, m);
        du += &(self.alpha * h2_squared_gradient(u, g, &self.quad));
        dm += &(self.alpha * h2_squared_gradient(m, g, &self.quad));
        Ok((du, dm))
    }

    /// Exact Hessian applied to `v`, restricted to unpinned nodes on both sides.
    pub fn hessian_vector(&self, s: &StatePair, v: &StatePair) -> Result<StatePair> {
        self.check_state(s)?;
        s.same_shape(v)?;
        let spec = self.spec;
        let g = &spec.grid;
        let r = spec.r.values();
        let (u, m) = (s.u.values(), s.m.values());
        let mut p = v.u.values().clone();
        let mut n = v.m.values().clone();
        p.column_mut(0).fill(0.0);
        n.column_mut(0).fill(0.0);
        let res = residuals(u, m, spec);
        let ux = &res.ux;
        let px = stencil::d_dx(p.view(), g.dx);

        let mut dl1 = stencil::d_dt(p.view(), g.dt);
        dl1 += &stencil::d2_dx2(p.view(), g.dx);
        dl1 += &spec.kernel.apply(n.view(), g);
        Zip::from(&mut dl1)
            .and(r)
            .and(ux)
            .and(&px)
            .and(spec.f.values())
            .and(&n)
            .for_each(|l, &r, &q, &qp, &f, &n| *l += -r * q * qp + f * n);
        let dflux = Array2::from_shape_fn(g.shape(), |idx| r[idx] * (n[idx] * ux[idx] + m[idx] * px[idx]));
        let mut dl2 = stencil::d_dt(n.view(), g.dt);
        dl2 -= &stencil::d2_dx2(n.view(), g.dx);
        dl2 -= &stencil::div_flux(dflux.view(), g.dx);

        let da = 2.0 * &self.weights * &dl1;
        let db = (2.0 * self.qd) * &self.weights * &dl2;
        let (mut du, mut dm) = self.backprop(&da, &db, ux, m);

        // curvature of the quadratic terms, weighted by the current residuals
        let a = 2.0 * &self.weights * &res.l1;
        let b = (2.0 * self.qd) * &self.weights * &res.l2;
        let back = stencil::div_flux_adjoint(b.view(), g.dx);
        let extra = Array2::from_shape_fn(g.shape(), |idx| -r[idx] * px[idx] * a[idx] - r[idx] * n[idx] * back[idx]);
        du += &stencil::d_dx_adjoint(extra.view(), g.dx);
        Zip::from(&mut dm).and(r).and(&px).and(&back).for_each(|d, &r, &q, &bk| *d -= r * q * bk);

        du += &(self.alpha * h2_squared_gradient(&p, g, &self.quad));
        dm += &(self.alpha * h2_squared_gradient(&n, g, &self.quad));
        self.finish(du, dm)
    }

    /// Number of unpinned unknowns, `2 nx (nt - 1)`.
    pub fn free_len(&self) -> usize {
        let g = &self.spec.grid;
        2 * g.nx * (g.nt - 1)
    }

    /// Unpinned entries of `s`: `u` then `m`, each by time slice then x.
    pub fn free_vector(&self, s: &StatePair) -> Vec<f64> {
        let g = &self.spec.grid;
        let mut out = Vec::with_capacity(self.free_len());
        for f in [&s.u, &s.m] {
            for j in 1..g.nt {
                for i in 0..g.nx {
                    out.push(f.at(i, j));
                }
            }
        }
        out
    }

    /// Inverse of [`Objective::free_vector`]; pinned entries are zero.
    pub fn from_free(&self, x: &[f64]) -> StatePair {
        let g = self.spec.grid;
        let half = g.nx * (g.nt - 1);
        let build = |off: usize| {
            Array2::from_shape_fn(g.shape(), |(i, j)| if j == 0 { 0.0 } else { x[off + (j - 1) * g.nx + i] })
        };
        StatePair { u: Field::from_raw(g, build(0)), m: Field::from_raw(g, build(half)) }
    }

    /// Dense Hessian over the unpinned unknowns, symmetrized. Columns are
    /// computed independently through `exec`.
    pub fn hessian_matrix(&self, s: &StatePair, exec: Exec) -> Result<nalgebra::DMatrix<f64>> {
        let n = self.free_len();
        let cols = exec::map(exec, (0..n).collect(), |k| -> Result<Vec<f64>> {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            Ok(self.free_vector(&self.hessian_vector(s, &self.from_free(&e))?))
        });
        let mut h = nalgebra::DMatrix::zeros(n, n);
        for (k, col) in cols.into_iter().enumerate() {
            for (i, v) in col?.into_iter().enumerate() {
                h[(i, k)] = v;
            }
        }
        let sym = (&h + h.transpose()) * 0.5;
        Ok(sym)
    }

    /// Bregman gap `J(s2) - J(s1) - <J'(s1), s2 - s1>` and the strong
    /// convexity floor `(alpha / 2) |s2 - s1|_H2^2`, both in scaled units.
    pub fn convexity_probe(&self, s1: &StatePair, s2: &StatePair) -> Result<ConvexityProbe> {
        s1.same_shape(s2)?;
        let pinned_equal =
            s1.u.values().column(0) == s2.u.values().column(0) && s1.m.values().column(0) == s2.m.values().column(0);
        if !pinned_equal {
            return Err(Error::Numerical("states differ on the pinned t = 0 plane".into()));
        }
        let j1 = self.eval(s1)?.total;
        let j2 = self.eval(s2)?.total;
        let grad = self.gradient(s1)?;
        let delta = s2.sub(s1);
        let gap = j2 - j1 - grad.dot(&delta);
        let delta_h2 = delta.h2_squared();
        Ok(ConvexityProbe { gap, floor: 0.5 * self.alpha * delta_h2, delta_h2, log_scale: self.log_scale })
    }
}

/// Result of [`Objective::convexity_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityProbe {
    pub gap: f64,
    pub floor: f64,
    pub delta_h2: f64,
    pub log_scale: f64,
}

pub fn eval_j(state: &StatePair, params: &ConvexParams, spec: &ProblemSpec) -> Result<ObjectiveBreakdown> {
    Objective::new(spec, *params)?.eval(state)
}

pub fn grad_j(state: &StatePair, params: &ConvexParams, spec: &ProblemSpec) -> Result<StatePair> {
    Objective::new(spec, *params)?.gradient(state)
}

pub fn convexity_probe(
    s1: &StatePair,
    s2: &StatePair,
    params: &ConvexParams,
    spec: &ProblemSpec,
) -> Result<ConvexityProbe> {
    Objective::new(spec, *params)?.convexity_probe(s1, s2)
}

/// `|grad_now| / |grad_start|`: the projected current gradient against the
/// full gradient at the start state.
pub fn first_order_optimality(grad_now: &StatePair, grad_start: &StatePair) -> Result<f64> {
    let den = grad_start.norm();
    if den == 0.0 {
        return Err(Error::ZeroInitialGradient);
    }
    Ok(grad_now.norm() / den)
}

/// Random direction supported off the pinned plane, unit Euclidean norm.
pub fn random_direction(like: &StatePair, rng: &mut impl Rng) -> StatePair {
    let g = *like.u.grid();
    let mut draw =
        || Array2::from_shape_fn(g.shape(), |(_, j)| if j == 0 { 0.0 } else { rng.random_range(-1.0..=1.0) });
    let dir = StatePair { u: Field::from_raw(g, draw()), m: Field::from_raw(g, draw()) };
    let n = dir.norm();
    dir.axpy(1.0 / n - 1.0, &dir)
}

/// Analytic directional derivatives compared with central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub directions: usize,
    pub seed: u64,
    pub step: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Relative error `|<g, e> - fd| / (|<g, e>| + 1e-12)` over `directions`
/// random directions, with step `1e-6 (1 + max |state|)`.
pub fn check_gradient(
    obj: &Objective,
    state: &StatePair,
    directions: usize,
    seed: u64,
    exec: Exec,
) -> Result<GradientCheckReport> {
    if directions == 0 {
        return Err(Error::Param { name: "directions", reason: "must be at least 1".into() });
    }
    let grad = obj.gradient(state)?;
    let h = 1e-6 * (1.0 + state.u.max_abs().max(state.m.max_abs()));
    let errs = exec::map(exec, (0..directions).collect(), |k| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let e = random_direction(state, &mut rng);
        let plus = obj.eval(&state.axpy(h, &e))?.total;
        let minus = obj.eval(&state.axpy(-h, &e))?.total;
        let fd = (plus - minus) / (2.0 * h);
        let an = grad.dot(&e);
        Ok((an - fd).abs() / (an.abs() + 1e-12))
    });
    let errs = errs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GradientCheckReport {
        directions,
        seed,
        step: h,
        max_rel_error: errs.iter().cloned().fold(0.0, f64::max),
        mean_rel_error: errs.iter().sum::<f64>() / errs.len() as f64,
    })
}

/// Bregman gaps over random state pairs around a base state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCheckReport {
    pub pairs: usize,
    pub seed: u64,
    pub radius: f64,
    pub log_scale: f64,
    /// Smallest `gap` over all pairs.
    pub min_gap: f64,
    /// Smallest `gap - floor` over all pairs.
    pub min_excess: f64,
    /// Smallest `gap / floor`.
    pub min_ratio: f64,
}

/// Perturbs `base` off the pinned plane with smooth random fields whose
/// Euclidean norm is drawn uniformly from `[0, radius]`.
pub fn random_state_near(base: &StatePair, radius: f64, rng: &mut impl Rng) -> StatePair {
    let g = *base.u.grid();
    let du = crate::carleman::random_test_field(&g, rng);
    let dm = crate::carleman::random_test_field(&g, rng);
    let delta = StatePair { u: du, m: dm };
    let target = radius * rng.random_range(0.0..=1.0);
    base.axpy(target / delta.norm(), &delta)
}

/// Runs [`Objective::convexity_probe`] on `pairs` seeded pairs drawn with
/// [`random_state_near`]. Pair `k` uses stream `k` of `seed`.
pub fn check_convexity(
    obj: &Objective,
    base: &StatePair,
    pairs: usize,
    radius: f64,
    seed: u64,
    exec: Exec,
) -> Result<ConvexityCheckReport> {
    if pairs == 0 {
        return Err(Error::Param { name: "pairs", reason: "must be at least 1".into() });
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Param { name: "radius", reason: format!("must be positive, got {radius}") });
    }
    let probes = exec::map(exec, (0..pairs).collect(), |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let s1 = random_state_near(base, radius, &mut rng);
        let s2 = random_state_near(base, radius, &mut rng);
        obj.convexity_probe(&s1, &s2)
    });
    let probes = probes.into_iter().collect::<Result<Vec<_>>>()?;
    let min = |f: &dyn Fn(&ConvexityProbe) -> f64| probes.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(ConvexityCheckReport {
        pairs,
        seed,
        radius,
        log_scale: obj.log_scale(),
        min_gap: min(&|p| p.gap),
        min_excess: min(&|p| p.gap - p.floor),
        min_ratio: min(&|p| if p.floor > 0.0 { p.gap / p.floor } else { f64::INFINITY }),
    })
}
