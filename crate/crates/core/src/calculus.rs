//! Finite-difference operators, trapezoid quadrature and the norms used by the solver.
//!
//! Space derivatives honour the zero-flux Neumann condition through a ghost node
//! that mirrors the first interior value: `d_dx` vanishes on the boundary and
//! `d2_dx2` uses `2 (f[1] - f[0]) / dx^2` there. Time derivatives are central in
//! the interior and second-order one-sided at `t = 0` and `t = T`.
//!
//! Every operator in [`stencil`] has a matching `*_adjoint` so that gradients of
//! quadratic functionals of the operators can be assembled exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBoundaryScheme {
    OneSidedSecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeumannMode {
    GhostReflection,
}

/// Describes the discretization in use. Only one configuration is implemented;
/// the record is echoed into run summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StencilConfig {
    pub interior_order: u8,
    pub boundary_time_scheme: TimeBoundaryScheme,
    pub neumann_mode: NeumannMode,
}

impl Default for StencilConfig {
    fn default() -> Self {
        StencilConfig {
            interior_order: 2,
            boundary_time_scheme: TimeBoundaryScheme::OneSidedSecondOrder,
            neumann_mode: NeumannMode::GhostReflection,
        }
    }
}

/// Raw stencils on `(nx, nt)` arrays and their exact transposes.
pub(crate) mod stencil {
    use ndarray::{Array2, ArrayView2};

    pub fn d_dt(f: ArrayView2<f64>, dt: f64) -> Array2<f64> {
        let (nx, nt) = f.dim();
        let h = 0.5 / dt;
        let mut out = Array2::zeros((nx, nt));
        for i in 0..nx {
            out[[i, 0]] = h * (-3.0 * f[[i, 0]] + 4.0 * f[[i, 1]] - f[[i, 2]]);
            for j in 1..nt - 1 {
                out[[i, j]] = h * (f[[i, j + 1]] - f[[i, j - 1]]);
            }
            let n = nt - 1;
            out[[i, n]] = h * (3.0 * f[[i, n]] - 4.0 * f[[i, n - 1]] + f[[i, n - 2]]);
        }
        out
    }

    pub fn d_dt_adjoint(a: ArrayView2<f64>, dt: f64) -> Array2<f64> {
        let (nx, nt) = a.dim();
        let h = 0.5 / dt;
        let mut out = Array2::zeros((nx, nt));
        for i in 0..nx {
            let a0 = h * a[[i, 0]];
            out[[i, 0]] -= 3.0 * a0;
            out[[i, 1]] += 4.0 * a0;
            out[[i, 2]] -= a0;
            for j in 1..nt - 1 {
                let aj = h * a[[i, j]];
                out[[i, j + 1]] += aj;
                out[[i, j - 1]] -= aj;
            }
            let n = nt - 1;
            let an = h * a[[i, n]];
            out[[i, n]] += 3.0 * an;
            out[[i, n - 1]] -= 4.0 * an;
            out[[i, n - 2]] += an;
        }
        out
    }

    pub fn d_dx(f: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = f.dim();
        let h = 0.5 / dx;
        let mut out = Array2::zeros((nx, nt));
        for j in 0..nt {
            for i in 1..nx - 1 {
                out[[i, j]] = h * (f[[i + 1, j]] - f[[i - 1, j]]);
            }
        }
        out
    }

    pub fn d_dx_adjoint(a: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = a.dim();
        let h = 0.5 / dx;
        let mut out = Array2::zeros((nx, nt));
        for j in 0..nt {
            for i in 1..nx - 1 {
                let ai = h * a[[i, j]];
                out[[i + 1, j]] += ai;
                out[[i - 1, j]] -= ai;
            }
        }
        out
    }

    /// Divergence of a flux that vanishes on the walls: central in the interior,
    /// odd ghost reflection (`p[-1] = -p[1]`) on the boundary.
    pub fn div_flux(p: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = p.dim();
        let h = 0.5 / dx;
        let mut out = Array2::zeros((nx, nt));
        for j in 0..nt {
            out[[0, j]] = 2.0 * h * p[[1, j]];
            for i in 1..nx - 1 {
                out[[i, j]] = h * (p[[i + 1, j]] - p[[i - 1, j]]);
            }
            out[[nx - 1, j]] = -2.0 * h * p[[nx - 2, j]];
        }
        out
    }

    pub fn div_flux_adjoint(a: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = a.dim();
        let h = 0.5 / dx;
        let mut out = d_dx_adjoint(a, dx);
        for j in 0..nt {
            out[[1, j]] += 2.0 * h * a[[0, j]];
            out[[nx - 2, j]] -= 2.0 * h * a[[nx - 1, j]];
        }
        out
    }

    pub fn d2_dx2(f: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = f.dim();
        let h = 1.0 / (dx * dx);
        let mut out = Array2::zeros((nx, nt));
        for j in 0..nt {
            out[[0, j]] = 2.0 * h * (f[[1, j]] - f[[0, j]]);
            for i in 1..nx - 1 {
                out[[i, j]] = h * (f[[i + 1, j]] - 2.0 * f[[i, j]] + f[[i - 1, j]]);
            }
            let n = nx - 1;
            out[[n, j]] = 2.0 * h * (f[[n - 1, j]] - f[[n, j]]);
        }
        out
    }

    pub fn d2_dx2_adjoint(a: ArrayView2<f64>, dx: f64) -> Array2<f64> {
        let (nx, nt) = a.dim();
        let h = 1.0 / (dx * dx);
        let mut out = Array2::zeros((nx, nt));
        for j in 0..nt {
            let a0 = 2.0 * h * a[[0, j]];
            out[[1, j]] += a0;
            out[[0, j]] -= a0;
            for i in 1..nx - 1 {
                let ai = h * a[[i, j]];
                out[[i + 1, j]] += ai;
                out[[i, j]] -= 2.0 * ai;
                out[[i - 1, j]] += ai;
            }
            let n = nx - 1;
            let an = 2.0 * h * a[[n, j]];
            out[[n - 1, j]] += an;
            out[[n, j]] -= an;
        }
        out
    }
}

fn need_nt(grid: &Grid) -> Result<()> {
    if grid.nt < 3 {
        return Err(Error::Grid(format!("time derivative needs nt >= 3, got {}", grid.nt)));
    }
    Ok(())
}

fn need_nx(grid: &Grid) -> Result<()> {
    if grid.nx < 3 {
        return Err(Error::Grid(format!("space derivative needs nx >= 3, got {}", grid.nx)));
    }
    Ok(())
}

pub fn d_dt(field: &Field) -> Result<Field> {
    let g = *field.grid();
    need_nt(&g)?;
    Ok(Field::from_raw(g, stencil::d_dt(field.values().view(), g.dt)))
}

pub fn d_dx(field: &Field) -> Result<Field> {
    let g = *field.grid();
    need_nx(&g)?;
    Ok(Field::from_raw(g, stencil::d_dx(field.values().view(), g.dx)))
}

pub fn d2_dx2(field: &Field) -> Result<Field> {
    let g = *field.grid();
    need_nx(&g)?;
    Ok(Field::from_raw(g, stencil::d2_dx2(field.values().view(), g.dx)))
}

/// Trapezoid rule over `[x_min, x_max]` for one value per x-node.
pub fn integrate_x(grid: &Grid, values: &[f64]) -> Result<f64> {
    if values.len() != grid.nx {
        return Err(Error::Shape(format!("integrate_x expects {} values, got {}", grid.nx, values.len())));
    }
    let w = grid.x_weights();
    Ok(w.iter().zip(values).map(|(w, v)| w * v).sum())
}

/// Trapezoid rule over the whole cylinder `Q_T`.
pub fn integrate_qt(field: &Field) -> f64 {
    let w = field.grid().space_time_weights();
    (&w * field.values()).sum()
}

/// `||f||_{L2(Q_T)}`.
pub fn norm_l2_qt(field: &Field) -> f64 {
    let w = field.grid().space_time_weights();
    (&w * &field.values().mapv(|v| v * v)).sum().sqrt()
}

/// `H^{1,0}(Q_{gamma T})` norm: `sqrt(int (f_x^2 + f^2))` over `t <= gamma T`.
pub fn norm_h10_qgamma(field: &Field) -> f64 {
    let g = field.grid();
    let fx = if g.nx >= 3 { stencil::d_dx(field.values().view(), g.dx) } else { Array2::zeros(g.shape()) };
    let ng = g.gamma_nt();
    let wx = g.x_weights();
    let wt = crate::grid::trapezoid_weights(ng, g.dt);
    let mut acc = 0.0;
    for j in 0..ng {
        for i in 0..g.nx {
            let f = field.at(i, j);
            acc += wx[i] * wt[j] * (fx[[i, j]] * fx[[i, j]] + f * f);
        }
    }
    acc.sqrt()
}

/// Squared discrete H^2 norm: L2(Q_T) norms of `f, f_t, f_x, f_xx`, squared and summed.
pub(crate) fn h2_squared(values: &Array2<f64>, grid: &Grid, w: &Array2<f64>) -> f64 {
    let v = values.view();
    let ft = stencil::d_dt(v, grid.dt);
    let fx = stencil::d_dx(v, grid.dx);
    let fxx = stencil::d2_dx2(v, grid.dx);
    let mut acc = 0.0;
    for ((idx, &wij), &f) in w.indexed_iter().zip(values.iter()) {
        acc += wij * (f * f + ft[idx] * ft[idx] + fx[idx] * fx[idx] + fxx[idx] * fxx[idx]);
    }
    acc
}

/// Gradient of [`h2_squared`] with respect to the node values.
pub(crate) fn h2_squared_gradient(values: &Array2<f64>, grid: &Grid, w: &Array2<f64>) -> Array2<f64> {
    let v = values.view();
    let wft = w * &stencil::d_dt(v, grid.dt);
    let wfx = w * &stencil::d_dx(v, grid.dx);
    let wfxx = w * &stencil::d2_dx2(v, grid.dx);
    let mut g = w * values;
    g += &stencil::d_dt_adjoint(wft.view(), grid.dt);
    g += &stencil::d_dx_adjoint(wfx.view(), grid.dx);
    g += &stencil::d2_dx2_adjoint(wfxx.view(), grid.dx);
    g * 2.0
}

/// Discrete H^2 surrogate norm over `Q_T` (function, first time derivative, first two space derivatives).
pub fn norm_h2_discrete(field: &Field) -> Result<f64> {
    let g = field.grid();
    need_nt(g)?;
    need_nx(g)?;
    Ok(h2_squared(field.values(), g, &g.space_time_weights()).sqrt())
}
