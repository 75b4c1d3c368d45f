//! Carleman weight function, the convexification parameters, and numeric
//! checks of the two weighted estimates behind convexity.
//!
//! The weight is `phi(t) = exp((T - t + c)^lambda)`. Everything that feeds the
//! functional is handled through the log of `phi^2`, so large `lambda` does not
//! overflow.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::stencil;
use crate::error::{param_err, Error, Result};
use crate::exec::{self, Exec};
use crate::grid::{Field, Grid};

/// Parameters of the convexification functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexParams {
    pub lambda: f64,
    pub c: f64,
    /// Balancing exponent, `> 1`.
    pub a: f64,
    /// Weight of the second residual.
    pub d: f64,
    pub alpha: f64,
    /// Fraction of `[0, T]` on which errors are measured.
    pub gamma: f64,
    pub t_max: f64,
    /// Radius of the admissible ball. Monitored, never enforced.
    pub radius: Option<f64>,
}

impl ConvexParams {
    /// `lambda = 2, c = 3, a = 1.1, d = 1, alpha = 1e-5, gamma = 0.6`.
    ///
    /// `c` is raised to `min_c(t_max)` when 3 is too small (T > 1.5).
    pub fn standard(t_max: f64) -> Result<Self> {
        let p = ConvexParams {
            lambda: 2.0,
            c: 3.0f64.max(min_c(t_max)?),
            a: 1.1,
            d: 1.0,
            alpha: 1e-5,
            gamma: 0.6,
            t_max,
            radius: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let lo = min_c(self.t_max)?;
        if !(self.c >= lo - 1e-12) {
            return param_err("c", format!("{} is below 1 + sqrt(1 + 2T) = {lo}", self.c));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return param_err("lambda", format!("must be positive, got {}", self.lambda));
        }
        if !(self.a > 1.0 && self.a.is_finite()) {
            return param_err("a", format!("must exceed 1, got {}", self.a));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return param_err("d", format!("must be positive, got {}", self.d));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return param_err("alpha", format!("must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return param_err("gamma", format!("must lie in (0, 1), got {}", self.gamma));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return param_err("radius", format!("must be positive, got {r}"));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> f64 {
        q_factor(self.lambda, self.c, self.t_max)
    }

    /// `-2 a c^lambda`, the log of [`ConvexParams::balance`].
    pub fn log_balance(&self) -> f64 {
        -2.0 * self.a * self.c.powf(self.lambda)
    }

    /// `exp(-2 a c^lambda)`; underflows to 0 for large `lambda`, use
    /// [`ConvexParams::log_balance`] in computations.
    pub fn balance(&self) -> f64 {
        self.log_balance().exp()
    }

    /// Sobolev index `floor((n + 1) / 2) + 4` for one space dimension.
    pub fn k_n(&self) -> usize {
        const SPACE_DIM: usize = 1;
        SPACE_DIM.div_ceil(2) + 4
    }

    pub fn alpha_min(&self) -> Result<f64> {
        alpha_min(self.lambda, self.c, self.a)
    }

    /// True when `alpha` is below the floor needed by the strong convexity theory.
    pub fn alpha_below_floor(&self) -> bool {
        self.alpha_min().map(|m| self.alpha < m).unwrap_or(false)
    }

    /// `log(balance * phi^2(t))`.
    pub fn log_weight(&self, t: f64) -> f64 {
        2.0 * log_cwf(t, self.lambda, self.c, self.t_max) + self.log_balance()
    }
}

/// Smallest admissible `c` for horizon `T`: `1 + sqrt(1 + 2T)`.
pub fn min_c(t_max: f64) -> Result<f64> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return param_err("T", format!("must be positive, got {t_max}"));
    }
    Ok(1.0 + (1.0 + 2.0 * t_max).sqrt())
}

/// `(T - t + c)^lambda`, the log of the weight.
pub fn log_cwf(t: f64, lambda: f64, c: f64, t_max: f64) -> f64 {
    (t_max - t + c).powf(lambda)
}

/// `exp((T - t + c)^lambda)`. Infinite once the exponent passes ~709; use
/// [`log_cwf`] there.
pub fn cwf(t: f64, lambda: f64, c: f64, t_max: f64) -> f64 {
    log_cwf(t, lambda, c, t_max).exp()
}

/// The weight on every node of `grid` (constant in x).
pub fn cwf_field(grid: &Grid, lambda: f64, c: f64) -> Result<Field> {
    let top = log_cwf(0.0, lambda, c, grid.t_max);
    if top > 700.0 {
        return Err(Error::Numerical(format!("weight exponent {top:.3e} overflows; evaluate through log_cwf")));
    }
    Field::from_fn(*grid, |_, t| cwf(t, lambda, c, grid.t_max))
}

/// `1 / (lambda (T + c)^(lambda - 1))`.
pub fn q_factor(lambda: f64, c: f64, t_max: f64) -> f64 {
    1.0 / (lambda * (t_max + c).powf(lambda - 1.0))
}

/// Lower end `2 exp(-(a - 1) c^lambda)` of the admissible `alpha` range.
pub fn alpha_min(lambda: f64, c: f64, a: f64) -> Result<f64> {
    if !(a > 1.0) {
        return param_err("a", format!("must exceed 1, got {a}"));
    }
    Ok(2.0 * (-(a - 1.0) * c.powf(lambda)).exp())
}

/// Outcome of a numeric check of one of the weighted estimates.
///
/// All integrals are divided by `exp(2 (T + c)^lambda)` (stored as
/// `log_scale`), so `min_gap` is in those units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanCheckReport {
    pub estimate: String,
    pub lambda_tested: f64,
    pub c: f64,
    pub t_max: f64,
    pub seed: u64,
    pub samples: usize,
    /// Samples for which the constant-carrying side is informative.
    pub informative: usize,
    pub min_gap: f64,
    pub fitted_c: f64,
    pub log_scale: f64,
    pub pass: bool,
}

/// Tolerance on `min_gap` (normalized units).
pub const GAP_TOLERANCE: f64 = 1e-12;

/// Random smooth field: cosine modes in x (each satisfies the zero-slope wall
/// condition) times a polynomial in t without constant term, so the field
/// vanishes at `t = 0` like the difference of two admissible states.
pub fn random_test_field(grid: &Grid, rng: &mut impl Rng) -> Field {
    const MODES: usize = 4;
    const DEGREE: i32 = 3;
    let len = grid.x_max - grid.x_min;
    loop {
        let coef: Vec<f64> = (0..MODES * DEGREE as usize).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let values = Array2::from_shape_fn(grid.shape(), |(i, j)| {
            let (x, t) = (grid.x(i), grid.t(j));
            let mut acc = 0.0;
            for k in 0..MODES {
                let cx = (k as f64 * std::f64::consts::PI * (x - grid.x_min) / len).cos();
                for p in 1..=DEGREE {
                    acc += coef[k * DEGREE as usize + (p - 1) as usize] * cx * t.powi(p);
                }
            }
            acc
        });
        if values.iter().any(|v| v.abs() > 1e-12) {
            return Field::from_raw(*grid, values);
        }
    }
}

fn sample_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Normalized `phi^2 * trapezoid weight` on the grid.
fn normalized_weights(grid: &Grid, lambda: f64, c: f64) -> (Array2<f64>, f64) {
    let scale = 2.0 * log_cwf(0.0, lambda, c, grid.t_max);
    let w = grid.space_time_weights();
    let wt: Vec<f64> = (0..grid.nt).map(|j| (2.0 * log_cwf(grid.t(j), lambda, c, grid.t_max) - scale).exp()).collect();
    let out = Array2::from_shape_fn(grid.shape(), |(i, j)| w[[i, j]] * wt[j]);
    (out, scale)
}

fn weighted(a: &Array2<f64>, w: &Array2<f64>) -> f64 {
    a.iter().zip(w.iter()).map(|(a, w)| a * a * w).sum()
}

fn slice_sq(grid: &Grid, a: &Array2<f64>, j: usize) -> f64 {
    let wx = grid.x_weights();
    (0..grid.nx).map(|i| wx[i] * a[[i, j]] * a[[i, j]]).sum()
}

fn check_args(samples: usize, lambda: f64, c: f64, grid: &Grid) -> Result<()> {
    if samples == 0 {
        return param_err("samples", "must be at least 1");
    }
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return param_err("lambda", format!("must be at least 1, got {lambda}"));
    }
    if c < min_c(grid.t_max)? - 1e-12 {
        return param_err("c", format!("{c} is below 1 + sqrt(1 + 2T)"));
    }
    if grid.nt < 3 || grid.nx < 3 {
        return Err(Error::Grid("checks need at least 3 nodes per axis".into()));
    }
    Ok(())
}

/// Terms of the heat-operator estimate for one field, normalized.
/// Returns `(lhs, bracket)` with the estimate reading `lhs >= C1 * bracket`.
fn carleman_terms(u: &Field, lambda: f64, c: f64, w: &Array2<f64>, scale: f64) -> (f64, f64) {
    let g = u.grid();
    let v = u.values().view();
    let ut = stencil::d_dt(v, g.dt);
    let ux = stencil::d_dx(v, g.dx);
    let uxx = stencil::d2_dx2(v, g.dx);
    let lhs = weighted(&(&ut + &uxx), w);
    let end = g.nt - 1;
    let at_t = slice_sq(g, &ux, end) + slice_sq(g, u.values(), end);
    let at_0 = slice_sq(g, u.values(), 0);
    let top = log_cwf(0.0, lambda, c, g.t_max);
    let bracket = lambda.sqrt() * weighted(&ux, w) + lambda * lambda * c.powf(lambda) * weighted(u.values(), w)
        - (2.0 * c.powf(lambda) - scale).exp() * at_t
        - lambda * top * at_0;
    (lhs, bracket)
}

/// Checks `int (u_t + u_xx)^2 phi^2 >= C1 [interior terms - boundary terms]`
/// on `samples` random fields.
///
/// `fitted_c` is the largest `C1` that works for every sample. The check
/// passes when every sample's bracket is positive (interior terms beat the
/// boundary terms) and that constant is positive.
pub fn check_carleman_estimate(
    samples: usize,
    lambda: f64,
    c: f64,
    grid: &Grid,
    seed: u64,
    exec: Exec,
) -> Result<CarlemanCheckReport> {
    check_args(samples, lambda, c, grid)?;
    let (w, scale) = normalized_weights(grid, lambda, c);
    let terms = exec::map(exec, (0..samples).collect(), |k| {
        let u = random_test_field(grid, &mut sample_rng(seed, k));
        carleman_terms(&u, lambda, c, &w, scale)
    });
    let informative = terms.iter().filter(|(_, b)| *b > 0.0).count();
    let fitted = terms.iter().filter(|(_, b)| *b > 0.0).map(|(l, b)| l / b).fold(f64::INFINITY, f64::min);
    let fitted_c = if informative == 0 { 0.0 } else { fitted };
    let min_gap = terms.iter().map(|(l, b)| l - fitted_c * b).fold(f64::INFINITY, f64::min);
    let pass = informative == samples && fitted_c > 0.0 && fitted_c.is_finite() && min_gap >= -GAP_TOLERANCE;
    Ok(CarlemanCheckReport {
        estimate: "carleman".into(),
        lambda_tested: lambda,
        c,
        t_max: grid.t_max,
        seed,
        samples,
        informative,
        min_gap,
        fitted_c,
        log_scale: scale,
        pass,
    })
}

/// Checks `int (u_t - u_xx + g v_xx)^2 phi^2 >= P(u) - C2 N(u, v)` where `P`
/// holds the constant-free interior terms in `u` and `N` the `v` gradient and
/// initial-slice terms.
///
/// Even-numbered samples use `v = 0`, where `N` is zero and the estimate must
/// hold with no help from `C2`. `fitted_c` is the smallest `C2 >= 0` that
/// covers the rest. The check passes when it is finite and every gap is
/// non-negative.
pub fn check_quasi_carleman(
    samples: usize,
    g: &Field,
    lambda: f64,
    c: f64,
    grid: &Grid,
    seed: u64,
    exec: Exec,
) -> Result<CarlemanCheckReport> {
    check_args(samples, lambda, c, grid)?;
    if g.grid() != grid {
        return Err(Error::Shape("g is not on the check grid".into()));
    }
    crate::grid::check_finite(g.values(), "g")?;
    let (w, scale) = normalized_weights(grid, lambda, c);
    let top = log_cwf(0.0, lambda, c, grid.t_max);
    let terms = exec::map(exec, (0..samples).collect(), |k| {
        let mut rng = sample_rng(seed, k);
        let u = random_test_field(grid, &mut rng);
        let v = if k % 2 == 0 { Field::zeros(*grid) } else { random_test_field(grid, &mut rng) };
        let (uv, vv) = (u.values().view(), v.values().view());
        let ux = stencil::d_dx(uv, grid.dx);
        let vx = stencil::d_dx(vv, grid.dx);
        let op = stencil::d_dt(uv, grid.dt) - stencil::d2_dx2(uv, grid.dx) + g.values() * &stencil::d2_dx2(vv, grid.dx);
        let lhs = weighted(&op, &w);
        let p = lambda * c.powf(lambda - 1.0) * weighted(&ux, &w)
            + 0.25 * lambda * lambda * c.powf(2.0 * lambda - 2.0) * weighted(u.values(), &w);
        let n =
            lambda * (grid.t_max + c).powf(lambda) * weighted(&vx, &w) + lambda * top * slice_sq(grid, u.values(), 0);
        (lhs, p, n)
    });
    let mut fitted_c: f64 = 0.0;
    for &(l, p, n) in &terms {
        if n > 0.0 {
            fitted_c = fitted_c.max((p - l) / n);
        }
    }
    let informative = terms.iter().filter(|t| t.2 > 0.0).count();
    let min_gap = terms.iter().map(|(l, p, n)| l - p + fitted_c * n).fold(f64::INFINITY, f64::min);
    let pass = fitted_c.is_finite() && min_gap >= -GAP_TOLERANCE;
    Ok(CarlemanCheckReport {
        estimate: "quasi_carleman".into(),
        lambda_tested: lambda,
        c,
        t_max: grid.t_max,
        seed,
        samples,
        informative,
        min_gap,
        fitted_c,
        log_scale: scale,
        pass,
    })
}

/// Runs `check` over `lambdas` in order and returns every report together with
/// the first passing `lambda`, if any.
pub fn lambda_sweep<F>(lambdas: &[f64], mut check: F) -> Result<(Vec<CarlemanCheckReport>, Option<f64>)>
where
    F: FnMut(f64) -> Result<CarlemanCheckReport>,
{
    let mut reports = Vec::with_capacity(lambdas.len());
    let mut first = None;
    for &l in lambdas {
        let r = check(l)?;
        if first.is_none() && r.pass {
            first = Some(l);
        }
        reports.push(r);
    }
    Ok((reports, first))
}
