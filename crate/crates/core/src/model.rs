//! The 1-D mean field games system
//!
//! ```text
//! L1(u, m) = u_t + u_xx - r u_x^2 / 2 + int K(x, y) m(y, t) dy + f m = 0
//! L2(u, m) = m_t - m_xx - (r m u_x)_x = 0
//! ```
//!
//! with zero-flux Neumann conditions, plus a forward Fokker-Planck marcher and
//! the manufactured-solution builder used to obtain ground truth.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::calculus::{integrate_x, norm_l2_qt, stencil};
use crate::error::{Error, Result};
use crate::grid::{check_finite, Field, Grid};

/// Smallest density value for which the source `f = -(...)/m` is formed.
pub const POSITIVITY_FLOOR: f64 = 1e-8;

/// Constant `C` in the bound `||L2(u_true, m_true)|| < C (dt + dx^2)` for
/// manufactured cases on the `dx = dt = 0.1` grid. The mismatch is dominated by
/// the first backward-Euler step, so it decays slower than first order under
/// refinement and the bound is only claimed at that grid scale.
pub const MISMATCH_CONSTANT: f64 = 10.0;

/// Interaction kernel `K(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Constant(f64),
    /// `K(x_i, y_k)` on the spatial nodes, shape `(nx, nx)`.
    Tabulated(Array2<f64>),
}

impl Kernel {
    pub fn validate(&self, grid: &Grid, bound: Option<f64>) -> Result<()> {
        let sup = match self {
            Kernel::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::Numerical("kernel constant is not finite".into()));
                }
                c.abs()
            }
            Kernel::Tabulated(k) => {
                if k.dim() != (grid.nx, grid.nx) {
                    return Err(Error::Shape(format!(
                        "tabulated kernel has shape {:?}, expected ({n}, {n})",
                        k.dim(),
                        n = grid.nx
                    )));
                }
                check_finite(k, "kernel")?;
                k.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
            }
        };
        if let Some(m) = bound {
            if sup > m {
                return Err(Error::Numerical(format!("kernel sup norm {sup} exceeds bound {m}")));
            }
        }
        Ok(())
    }

    /// `int K(x_i, y) m(y, t_j) dy` for every node, trapezoid in `y`.
    pub(crate) fn apply(&self, m: ArrayView2<f64>, grid: &Grid) -> Array2<f64> {
        let w = grid.x_weights();
        let (nx, nt) = m.dim();
        match self {
            Kernel::Constant(c) => {
                let mut out = Array2::zeros((nx, nt));
                for j in 0..nt {
                    let mass: f64 = (0..nx).map(|k| w[k] * m[[k, j]]).sum();
                    out.column_mut(j).fill(c * mass);
                }
                out
            }
            Kernel::Tabulated(k) => {
                let wm = Array2::from_shape_fn((nx, nt), |(i, j)| w[i] * m[[i, j]]);
                k.dot(&wm)
            }
        }
    }

    /// Transpose of [`Kernel::apply`].
    pub(crate) fn apply_adjoint(&self, a: ArrayView2<f64>, grid: &Grid) -> Array2<f64> {
        let w = grid.x_weights();
        let (nx, nt) = a.dim();
        match self {
            Kernel::Constant(c) => {
                let mut out = Array2::zeros((nx, nt));
                for j in 0..nt {
                    let s: f64 = a.column(j).sum();
                    for k in 0..nx {
                        out[[k, j]] = c * w[k] * s;
                    }
                }
                out
            }
            Kernel::Tabulated(k) => {
                let kt_a = k.t().dot(&a);
                Array2::from_shape_fn((nx, nt), |(i, j)| w[i] * kt_a[[i, j]])
            }
        }
    }
}

/// One instance of the forecasting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub grid: Grid,
    /// Coefficient `r(x, t)`; `-1` in every canned test.
    pub r: Field,
    pub kernel: Kernel,
    /// Source multiplying `m` in the first equation; zero outside manufactured cases.
    pub f: Field,
    pub u0: Vec<f64>,
    pub m0: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(grid: Grid, r: Field, kernel: Kernel, f: Field, u0: Vec<f64>, m0: Vec<f64>) -> Result<Self> {
        let spec = ProblemSpec { grid, r, kernel, f, u0, m0 };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with `r = -1` and `f = 0`.
    pub fn realistic(grid: Grid, kernel: Kernel, u0: Vec<f64>, m0: Vec<f64>) -> Result<Self> {
        ProblemSpec::new(grid, Field::constant(grid, -1.0), kernel, Field::zeros(grid), u0, m0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u0.len() != self.grid.nx || self.m0.len() != self.grid.nx {
            return Err(Error::Shape(format!(
                "initial data lengths ({}, {}) differ from nx = {}",
                self.u0.len(),
                self.m0.len(),
                self.grid.nx
            )));
        }
        self.r.same_grid(&Field::zeros(self.grid), "r")?;
        self.f.same_grid(&Field::zeros(self.grid), "f")?;
        for (name, data) in [("u0", &self.u0), ("m0", &self.m0)] {
            if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { context: name.into(), i, j: 0, value: *v });
            }
        }
        self.kernel.validate(&self.grid, None)
    }

    /// Checks that `m0` is a probability density: non-negative with mass within 10% of 1.
    pub fn check_density(&self) -> Result<()> {
        if let Some((i, &v)) = self.m0.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NonPositiveDensity { min: v, i, j: 0 });
        }
        let mass = integrate_x(&self.grid, &self.m0)?;
        if (mass - 1.0).abs() > 0.1 {
            return Err(Error::Numerical(format!("initial density has mass {mass}, expected ~1")));
        }
        Ok(())
    }

    /// `max |r|`, the part of the `C^1` bound on `r` that is cheap to report.
    pub fn r_sup(&self) -> f64 {
        self.r.max_abs()
    }
}

fn check_pair(u: &Field, m: &Field, spec: &ProblemSpec) -> Result<()> {
    u.same_grid(m, "u/m")?;
    if *u.grid() != spec.grid {
        return Err(Error::Shape("state grid differs from problem grid".into()));
    }
    Ok(())
}

/// Kernel term at time slice `j`.
pub fn kernel_term(m: &Field, kernel: &Kernel, j: usize) -> Result<Vec<f64>> {
    let g = *m.grid();
    let col = m.slice_at_time(j)?;
    match kernel {
        Kernel::Constant(c) => Ok(vec![c * integrate_x(&g, &col)?; g.nx]),
        Kernel::Tabulated(k) => (0..g.nx)
            .map(|i| {
                let row: Vec<f64> = (0..g.nx).map(|y| k[[i, y]] * col[y]).collect();
                integrate_x(&g, &row)
            })
            .collect(),
    }
}

/// Raw residual arrays shared by the residual operators and the objective.
pub(crate) struct Residuals {
    pub l1: Array2<f64>,
    pub l2: Array2<f64>,
    pub ux: Array2<f64>,
}

pub(crate) fn residuals(u: &Array2<f64>, m: &Array2<f64>, spec: &ProblemSpec) -> Residuals {
    let g = &spec.grid;
    let r = spec.r.values();
    let ux = stencil::d_dx(u.view(), g.dx);

    let mut l1 = stencil::d_dt(u.view(), g.dt);
    l1 += &stencil::d2_dx2(u.view(), g.dx);
    l1 += &spec.kernel.apply(m.view(), g);
    ndarray::Zip::from(&mut l1)
        .and(r)
        .and(&ux)
        .and(spec.f.values())
        .and(m)
        .for_each(|l, &r, &p, &f, &m| *l += -0.5 * r * p * p + f * m);

    let flux = Array2::from_shape_fn(u.dim(), |idx| r[idx] * m[idx] * ux[idx]);
    let mut l2 = stencil::d_dt(m.view(), g.dt);
    l2 -= &stencil::d2_dx2(m.view(), g.dx);
    l2 -= &stencil::div_flux(flux.view(), g.dx);

    Residuals { l1, l2, ux }
}

/// Pointwise `L1(u, m)`.
pub fn residual_l1(u: &Field, m: &Field, spec: &ProblemSpec) -> Result<Field> {
    check_pair(u, m, spec)?;
    let res = residuals(u.values(), m.values(), spec);
    check_finite(&res.l1, "residual_l1")?;
    Ok(Field::from_raw(spec.grid, res.l1))
}

/// Pointwise `L2(u, m)`. The divergence is applied to the product `r m u_x`
/// (flux form), with the flux taken as odd about the walls where it vanishes.
pub fn residual_l2(u: &Field, m: &Field, spec: &ProblemSpec) -> Result<Field> {
    check_pair(u, m, spec)?;
    let res = residuals(u.values(), m.values(), spec);
    check_finite(&res.l2, "residual_l2")?;
    Ok(Field::from_raw(spec.grid, res.l2))
}

/// Solves `A x = d` for tridiagonal `A` (sub `a`, diagonal `b`, super `c`).
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let denom = b[i] - a[i] * cp[i - 1];
        assert!(denom.abs() > 0.0, "singular tridiagonal system");
        cp[i] = c[i] / denom;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Marches `m_t - m_xx - (r m u_x)_x = 0` forward from `m0` with `u` given.
///
/// Diffusion is backward Euler (one tridiagonal solve per step); the drift is
/// explicit, built from face fluxes `r m u_x` at `t_n` with zero flux through
/// the walls. Both parts are exact divergences on the trapezoid control
/// volumes, so the discrete mass is conserved to round-off.
pub fn solve_fokker_planck(u: &Field, m0: &[f64], spec: &ProblemSpec) -> Result<Field> {
    let g = spec.grid;
    if *u.grid() != g {
        return Err(Error::Shape("u is not on the problem grid".into()));
    }
    if m0.len() != g.nx {
        return Err(Error::Shape(format!("m0 has {} entries, nx = {}", m0.len(), g.nx)));
    }
    if g.nx < 3 {
        return Err(Error::Grid("Fokker-Planck march needs nx >= 3".into()));
    }
    if let Some((i, v)) = m0.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { context: "m0".into(), i, j: 0, value: *v });
    }
    check_finite(u.values(), "u")?;

    let nx = g.nx;
    let s = g.dt / (g.dx * g.dx);
    let mut sub = vec![-s; nx];
    let diag = vec![1.0 + 2.0 * s; nx];
    let mut sup = vec![-s; nx];
    sub[0] = 0.0;
    sup[0] = -2.0 * s;
    sub[nx - 1] = -2.0 * s;
    sup[nx - 1] = 0.0;

    let mut m = Array2::zeros(g.shape());
    m.column_mut(0).assign(&Array1::from(m0.to_vec()));
    let uv = u.values();
    let rv = spec.r.values();
    let mut flux = vec![0.0; nx - 1];
    for n in 0..g.nt - 1 {
        for (k, fk) in flux.iter_mut().enumerate() {
            let r_face = 0.5 * (rv[[k, n]] + rv[[k + 1, n]]);
            let m_face = 0.5 * (m[[k, n]] + m[[k + 1, n]]);
            *fk = r_face * m_face * (uv[[k + 1, n]] - uv[[k, n]]) / g.dx;
        }
        let mut rhs = vec![0.0; nx];
        rhs[0] = m[[0, n]] + g.dt * 2.0 * flux[0] / g.dx;
        for i in 1..nx - 1 {
            rhs[i] = m[[i, n]] + g.dt * (flux[i] - flux[i - 1]) / g.dx;
        }
        rhs[nx - 1] = m[[nx - 1, n]] - g.dt * 2.0 * flux[nx - 2] / g.dx;
        let next = thomas(&sub, &diag, &sup, &rhs);
        m.column_mut(n + 1).assign(&Array1::from(next));
    }
    check_finite(&m, "fokker-planck solution")?;
    Ok(Field::from_raw(g, m))
}

fn min_node(m: &Field) -> (f64, usize, usize) {
    m.values().indexed_iter().fold((f64::INFINITY, 0, 0), |acc, ((i, j), &v)| if v < acc.0 { (v, i, j) } else { acc })
}

/// Source `f = -(u_t + u_xx - r u_x^2 / 2 + int K m) / m` that makes `L1(u, m) = 0` at every node.
pub fn manufactured_f(u: &Field, m: &Field, r: &Field, kernel: &Kernel) -> Result<Field> {
    u.same_grid(m, "manufactured_f")?;
    u.same_grid(r, "manufactured_f")?;
    let (min, i, j) = min_node(m);
    if min <= POSITIVITY_FLOOR {
        return Err(Error::NonPositiveDensity { min, i, j });
    }
    let g = *u.grid();
    let uv = u.values();
    let ux = stencil::d_dx(uv.view(), g.dx);
    let mut bracket = stencil::d_dt(uv.view(), g.dt);
    bracket += &stencil::d2_dx2(uv.view(), g.dx);
    bracket += &kernel.apply(m.values().view(), &g);
    let rv = r.values();
    let f =
        Array2::from_shape_fn(g.shape(), |idx| -(bracket[idx] - 0.5 * rv[idx] * ux[idx] * ux[idx]) / m.values()[idx]);
    Field::from_values(g, f)
}

/// A manufactured ("ideal") case with known solution.
#[derive(Debug, Clone)]
pub struct IdealCase {
    pub u_true: Field,
    pub m_true: Field,
    pub f_field: Field,
    /// Problem with exact initial data taken from the truth at `t = 0`.
    pub spec: ProblemSpec,
    /// `||L1(u_true, m_true)||_{L2(Q_T)}`; zero up to round-off.
    pub residual_l1_norm: f64,
    /// `||L2(u_true, m_true)||_{L2(Q_T)}`: mismatch between the marching scheme and the residual stencils.
    pub residual_l2_norm: f64,
    pub provenance: String,
}

impl IdealCase {
    /// `MISMATCH_CONSTANT * (dt + dx^2)` for this case's grid.
    pub fn mismatch_bound(&self) -> f64 {
        let g = self.u_true.grid();
        MISMATCH_CONSTANT * (g.dt + g.dx * g.dx)
    }
}

/// Maximum `|u_x|` on `x = x_min, x_max` over all time nodes, by a one-sided
/// three-point difference with a small step on the continuous function.
fn boundary_slope<U: Fn(f64, f64) -> f64>(u: &U, grid: &Grid) -> (f64, f64, f64) {
    let h = 1e-4;
    let mut worst = (0.0, grid.x_min, 0.0);
    for j in 0..grid.nt {
        let t = grid.t(j);
        let right = (3.0 * u(grid.x_max, t) - 4.0 * u(grid.x_max - h, t) + u(grid.x_max - 2.0 * h, t)) / (2.0 * h);
        let left = (-3.0 * u(grid.x_min, t) + 4.0 * u(grid.x_min + h, t) - u(grid.x_min + 2.0 * h, t)) / (2.0 * h);
        for (s, x) in [(right.abs(), grid.x_max), (left.abs(), grid.x_min)] {
            if s > worst.0 {
                worst = (s, x, t);
            }
        }
    }
    worst
}

/// Builds ground truth: take `u`, march `m` from `m0` under `u`, then choose `f`
/// so that the first equation holds exactly. Uses `r = -1`.
pub fn build_ideal_case<U, M>(u_choice: U, m0_choice: M, kernel: Kernel, grid: Grid) -> Result<IdealCase>
where
    U: Fn(f64, f64) -> f64,
    M: Fn(f64) -> f64,
{
    let (slope, x, t) = boundary_slope(&u_choice, &grid);
    if slope >= grid.dx * grid.dx {
        return Err(Error::Neumann { slope, x, t });
    }
    let u_true = Field::from_fn(grid, &u_choice)?;
    let m0: Vec<f64> = grid.xs().iter().map(|&x| m0_choice(x)).collect();
    let r = Field::constant(grid, -1.0);
    let transport =
        ProblemSpec::new(grid, r.clone(), kernel.clone(), Field::zeros(grid), u_true.slice_at_time(0)?, m0.clone())?;
    let m_true = solve_fokker_planck(&u_true, &m0, &transport)?;
    let f_field = manufactured_f(&u_true, &m_true, &r, &kernel)?;
    let spec = ProblemSpec::new(grid, r, kernel, f_field.clone(), u_true.slice_at_time(0)?, m0)?;
    let residual_l1_norm = norm_l2_qt(&residual_l1(&u_true, &m_true, &spec)?);
    let residual_l2_norm = norm_l2_qt(&residual_l2(&u_true, &m_true, &spec)?);
    Ok(IdealCase { u_true, m_true, f_field, spec, residual_l1_norm, residual_l2_norm, provenance: "custom".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn standard() -> Grid {
        Grid::standard(1.0).unwrap()
    }

    fn bump(x: f64) -> f64 {
        if x.abs() < 1.0 {
            (1.0 / (x * x - 1.0)).exp()
        } else {
            0.0
        }
    }

    fn t11_u(x: f64, t: f64) -> f64 {
        (x * x - 1.0).powi(2) * (t * t + 1.0)
    }

    fn simple_spec(kernel: Kernel) -> ProblemSpec {
        let g = standard();
        ProblemSpec::realistic(g, kernel, vec![0.0; g.nx], vec![0.5; g.nx]).unwrap()
    }

    #[test]
    fn kernel_term_constant_density() {
        let g = standard();
        let m = Field::constant(g, 0.5);
        for (c, want) in [(1.0, 1.0), (-1.0, -1.0)] {
            let k = kernel_term(&m, &Kernel::Constant(c), 3).unwrap();
            assert!(k.iter().all(|v| (v - want).abs() < 1e-14));
        }
    }

    #[test]
    fn kernel_term_tabulated_matches_constant() {
        let g = standard();
        let m = Field::from_fn(g, |x, t| 0.5 + 0.2 * (PI * x).cos() * t).unwrap();
        let tab = Kernel::Tabulated(Array2::from_elem((g.nx, g.nx), 1.0));
        for j in 0..g.nt {
            let a = kernel_term(&m, &Kernel::Constant(1.0), j).unwrap();
            let b = kernel_term(&m, &tab, j).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_relative_eq!(x, y, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn kernel_adjoint_is_transpose() {
        let g = standard();
        let a = Array2::from_shape_fn(g.shape(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.3);
        let b = Array2::from_shape_fn(g.shape(), |(i, j)| 1.0 + ((i * 2 + j * 5) % 7) as f64 * 0.3);
        let tab = Kernel::Tabulated(Array2::from_shape_fn((g.nx, g.nx), |(i, k)| (i as f64 - k as f64).sin()));
        for k in [Kernel::Constant(-1.3), tab] {
            let lhs = (&k.apply(a.view(), &g) * &b).sum();
            let rhs = (&a * &k.apply_adjoint(b.view(), &g)).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn tabulated_kernel_shape_checked() {
        let g = standard();
        let k = Kernel::Tabulated(Array2::zeros((3, 3)));
        assert!(k.validate(&g, None).is_err());
        assert!(Kernel::Constant(2.0).validate(&g, Some(1.0)).is_err());
    }

    #[test]
    fn residual_l1_trivial_cases() {
        let g = standard();
        let spec = simple_spec(Kernel::Constant(1.0));
        let zero = Field::zeros(g);
        let spec0 = ProblemSpec::realistic(g, Kernel::Constant(1.0), vec![0.0; 21], vec![0.0; 21]).unwrap();
        let r = residual_l1(&zero, &zero, &spec0).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));

        let half = Field::constant(g, 0.5);
        let r = residual_l1(&zero, &half, &spec).unwrap();
        assert!(r.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn residual_l2_vanishes_on_constants() {
        let g = standard();
        let spec = simple_spec(Kernel::Constant(1.0));
        let r = residual_l2(&Field::constant(g, 2.0), &Field::constant(g, 0.5), &spec).unwrap();
        assert!(r.values().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn residual_l2_pure_diffusion_matches_analytic() {
        // u = 0, m = e^t cos(pi x): m_t - m_xx = (1 + pi^2) m
        let g = Grid::new(-1.0, 1.0, 1.0, 0.025, 0.025, 0.5).unwrap();
        let spec = ProblemSpec::realistic(g, Kernel::Constant(0.0), vec![0.0; g.nx], vec![0.0; g.nx]).unwrap();
        let m = Field::from_fn(g, |x, t| t.exp() * (PI * x).cos()).unwrap();
        let r = residual_l2(&Field::zeros(g), &m, &spec).unwrap();
        for i in 1..g.nx - 1 {
            for j in 1..g.nt - 1 {
                let exact = (1.0 + PI * PI) * m.at(i, j);
                assert!((r.at(i, j) - exact).abs() < 0.05, "({i},{j})");
            }
        }
    }

    #[test]
    fn residual_shape_mismatch_rejected() {
        let spec = simple_spec(Kernel::Constant(1.0));
        let other = Grid::standard(2.0).unwrap();
        let a = Field::zeros(other);
        assert!(residual_l1(&a, &a, &spec).is_err());
        assert!(residual_l2(&Field::zeros(spec.grid), &a, &spec).is_err());
    }

    #[test]
    fn fokker_planck_constant_stays_constant() {
        let g = standard();
        let spec = simple_spec(Kernel::Constant(1.0));
        let m = solve_fokker_planck(&Field::zeros(g), &[0.5; 21], &spec).unwrap();
        assert!(m.values().iter().all(|v| (v - 0.5).abs() < 1e-14));
    }

    #[test]
    fn fokker_planck_conserves_mass() {
        let g = standard();
        let spec = simple_spec(Kernel::Constant(1.0));
        let u = Field::from_fn(g, t11_u).unwrap();
        let m0: Vec<f64> = g.xs().iter().map(|&x| bump(x) + 0.28).collect();
        let m = solve_fokker_planck(&u, &m0, &spec).unwrap();
        let mass0 = integrate_x(&g, &m0).unwrap();
        for j in 0..g.nt {
            let mass = integrate_x(&g, &m.slice_at_time(j).unwrap()).unwrap();
            assert!((mass - mass0).abs() < 1e-10, "j={j}: {mass} vs {mass0}");
        }
        // even a rough, non-Neumann drift keeps mass
        let rough = Field::from_fn(g, |x, t| (3.0 * x).sin() * (1.0 + t)).unwrap();
        let m = solve_fokker_planck(&rough, &m0, &spec).unwrap();
        let mass = integrate_x(&g, &m.slice_at_time(g.nt - 1).unwrap()).unwrap();
        assert!((mass - mass0).abs() < 1e-10);
    }

    #[test]
    fn fokker_planck_first_order_in_time() {
        // self-convergence with fixed dx: errors against a fine-dt reference shrink ~linearly
        let final_slice = |dt: f64| {
            let g = Grid::new(-1.0, 1.0, 1.0, 0.1, dt, 0.5).unwrap();
            let spec = ProblemSpec::realistic(g, Kernel::Constant(1.0), vec![0.0; g.nx], vec![0.0; g.nx]).unwrap();
            let u = Field::from_fn(g, t11_u).unwrap();
            let m0: Vec<f64> = g.xs().iter().map(|&x| bump(x) + 0.28).collect();
            solve_fokker_planck(&u, &m0, &spec).unwrap().slice_at_time(g.nt - 1).unwrap()
        };
        let reference = final_slice(0.1 / 64.0);
        let err = |dt: f64| final_slice(dt).iter().zip(&reference).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        let (e1, e2, e3) = (err(0.1 / 4.0), err(0.1 / 8.0), err(0.1 / 16.0));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((1.6..=2.6).contains(&ratio), "ratio {ratio} ({e1}, {e2}, {e3})");
        }
    }

    #[test]
    fn fokker_planck_rejects_bad_input() {
        let g = standard();
        let spec = simple_spec(Kernel::Constant(1.0));
        assert!(solve_fokker_planck(&Field::zeros(g), &[0.5; 20], &spec).is_err());
        let mut m0 = vec![0.5; 21];
        m0[4] = f64::NAN;
        assert!(solve_fokker_planck(&Field::zeros(g), &m0, &spec).is_err());
    }

    #[test]
    fn manufactured_f_closed_form() {
        let g = standard();
        let f = manufactured_f(
            &Field::zeros(g),
            &Field::constant(g, 0.5),
            &Field::constant(g, -1.0),
            &Kernel::Constant(1.0),
        )
        .unwrap();
        assert!(f.values().iter().all(|v| (v + 2.0).abs() < 1e-14));
    }

    #[test]
    fn manufactured_f_zeroes_first_residual() {
        let g = standard();
        let u = Field::from_fn(g, |x, t| (x * 2.0).sin() * t + x * x).unwrap();
        let m = Field::from_fn(g, |x, t| 1.0 + 0.5 * (x + t).cos()).unwrap();
        let r = Field::constant(g, -1.0);
        let f = manufactured_f(&u, &m, &r, &Kernel::Constant(-1.0)).unwrap();
        let spec = ProblemSpec::new(g, r, Kernel::Constant(-1.0), f, vec![0.0; 21], vec![1.0; 21]).unwrap();
        let res = residual_l1(&u, &m, &spec).unwrap();
        assert!(res.max_abs() < 1e-11, "{}", res.max_abs());
    }

    #[test]
    fn manufactured_f_needs_positive_density() {
        let g = standard();
        let m = Field::from_fn(g, |x, t| if x > 0.45 && t > 0.75 { 0.0 } else { 1.0 }).unwrap();
        let err = manufactured_f(&Field::zeros(g), &m, &Field::constant(g, -1.0), &Kernel::Constant(1.0)).unwrap_err();
        match err {
            Error::NonPositiveDensity { min, i, j } => {
                assert_eq!(min, 0.0);
                assert_eq!((i, j), (15, 8));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn ideal_cases_build() {
        let g = standard();
        let case = build_ideal_case(t11_u, |x| bump(x) + 0.28, Kernel::Constant(1.0), g).unwrap();
        assert!(case.residual_l1_norm < 1e-12, "{}", case.residual_l1_norm);
        assert!(case.residual_l2_norm < case.mismatch_bound());
        assert_relative_eq!(case.residual_l2_norm, 0.532, epsilon = 5e-3);
        assert!(case.m_true.values().iter().all(|&v| v > 0.0));
        assert_eq!(case.spec.u0, case.u_true.slice_at_time(0).unwrap());
        case.spec.check_density().unwrap();

        let case =
            build_ideal_case(|x, t| 0.1 * (2.0 * PI * x).cos() * (t + 1.0), |_| 0.5, Kernel::Constant(1.0), g).unwrap();
        assert!(case.residual_l1_norm < 1e-12);
        assert!(case.residual_l2_norm < case.mismatch_bound());
        assert_relative_eq!(case.residual_l2_norm, 0.292, epsilon = 5e-3);
    }

    #[test]
    fn ideal_case_rejects_non_neumann_u() {
        let err = build_ideal_case(|x, t| x * t, |_| 0.5, Kernel::Constant(1.0), standard()).unwrap_err();
        assert!(matches!(err, Error::Neumann { .. }), "{err}");
    }

    #[test]
    fn residuals_are_deterministic() {
        let g = standard();
        let case = build_ideal_case(t11_u, |x| bump(x) + 0.28, Kernel::Constant(1.0), g).unwrap();
        let a = residual_l2(&case.u_true, &case.m_true, &case.spec).unwrap();
        let b = residual_l2(&case.u_true, &case.m_true, &case.spec).unwrap();
        assert_eq!(a, b);
    }
}
