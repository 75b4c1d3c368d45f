//! Uniform space-time lattice over `[x_min, x_max] x [0, T]` and scalar fields on it.
//!
//! The lattice is vertex centred: both spatial endpoints and both `t = 0` and
//! `t = T` are nodes. Node `(i, j)` sits at `(x_min + i*dx, j*dt)`; coordinates
//! are always recomputed from the index, never accumulated.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for a step to count as dividing an extent.
const DIVISIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub t_max: f64,
    pub dx: f64,
    pub dt: f64,
    pub nx: usize,
    pub nt: usize,
    /// Fraction of `[0, T]` covered by the sub-cylinder `Q_{gamma T}`.
    pub gamma: f64,
}

fn node_count(extent: f64, step: f64, axis: &str) -> Result<usize> {
    let cells = extent / step;
    let rounded = cells.round();
    if rounded < 1.0 || (cells - rounded).abs() > DIVISIBILITY_TOL * rounded.max(1.0) {
        return Err(Error::Grid(format!("{axis} step {step} does not divide the {axis} extent {extent}")));
    }
    Ok(rounded as usize + 1)
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, t_max: f64, dx: f64, dt: f64, gamma: f64) -> Result<Self> {
        let all = [x_min, x_max, t_max, dx, dt, gamma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Grid("non-finite grid parameter".into()));
        }
        if x_min >= x_max {
            return Err(Error::Grid(format!("x_min {x_min} must be below x_max {x_max}")));
        }
        if t_max <= 0.0 {
            return Err(Error::Grid(format!("T must be positive, got {t_max}")));
        }
        if dx <= 0.0 || dt <= 0.0 {
            return Err(Error::Grid(format!("steps must be positive, got dx={dx}, dt={dt}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Grid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let nx = node_count(x_max - x_min, dx, "x")?;
        let nt = node_count(t_max, dt, "t")?;
        Ok(Grid { x_min, x_max, t_max, dx, dt, nx, nt, gamma })
    }

    /// The lattice used throughout the numerical tests: `[-1, 1] x [0, T]`, step 0.1.
    pub fn standard(t_max: f64) -> Result<Self> {
        Grid::new(-1.0, 1.0, t_max, 0.1, 0.1, 0.6)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Grid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn xs(&self) -> Array1<f64> {
        Array1::from_iter((0..self.nx).map(|i| self.x(i)))
    }

    pub fn ts(&self) -> Array1<f64> {
        Array1::from_iter((0..self.nt).map(|j| self.t(j)))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.nt)
    }

    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of time nodes with `t_j <= gamma * T`, i.e. `floor(gamma T / dt) + 1`.
    pub fn gamma_nt(&self) -> usize {
        let ratio = self.gamma * self.t_max / self.dt;
        ((ratio + 1e-9).floor() as usize + 1).min(self.nt)
    }

    /// Trapezoid weights along x.
    pub fn x_weights(&self) -> Array1<f64> {
        trapezoid_weights(self.nx, self.dx)
    }

    /// Trapezoid weights along t.
    pub fn t_weights(&self) -> Array1<f64> {
        trapezoid_weights(self.nt, self.dt)
    }

    /// Tensor-product trapezoid weights over the full cylinder, shape `(nx, nt)`.
    pub fn space_time_weights(&self) -> Array2<f64> {
        let wx = self.x_weights();
        let wt = self.t_weights();
        Array2::from_shape_fn((self.nx, self.nt), |(i, j)| wx[i] * wt[j])
    }
}

pub(crate) fn trapezoid_weights(n: usize, h: f64) -> Array1<f64> {
    let mut w = Array1::from_elem(n, h);
    if n > 0 {
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
    }
    if n == 1 {
        w[0] = 0.0;
    }
    w
}

/// A scalar function sampled at every lattice node; `values[[i, j]]` is the value at `(x_i, t_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Array2<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Field { grid, values: Array2::zeros(grid.shape()) }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Field { grid, values: Array2::from_elem(grid.shape(), value) }
    }

    /// Samples `g(x, t)` at every node. Rejects the first non-finite sample.
    pub fn from_fn<G>(grid: Grid, g: G) -> Result<Self>
    where
        G: Fn(f64, f64) -> f64,
    {
        let values = Array2::from_shape_fn(grid.shape(), |(i, j)| g(grid.x(i), grid.t(j)));
        Field::from_values(grid, values)
    }

    pub fn from_values(grid: Grid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "field values have shape {:?}, grid expects {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        check_finite(&values, "field")?;
        Ok(Field { grid, values })
    }

    /// Wraps values produced by internal operators whose finiteness follows from finite inputs.
    pub(crate) fn from_raw(grid: Grid, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), grid.shape());
        Field { grid, values }
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    /// Field constant in time, equal to `profile` at every time slice.
    pub fn extend_in_time(grid: Grid, profile: &[f64]) -> Result<Self> {
        if profile.len() != grid.nx {
            return Err(Error::Shape(format!("profile has {} entries, grid has nx = {}", profile.len(), grid.nx)));
        }
        Field::from_values(grid, Array2::from_shape_fn(grid.shape(), |(i, _)| profile[i]))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Copy of the time slice `j` (one value per x-node).
    pub fn slice_at_time(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.grid.nt {
            return Err(Error::Shape(format!("time index {j} out of range (nt = {})", self.grid.nt)));
        }
        Ok(self.values.column(j).to_vec())
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Result<Field> {
        Field::from_values(self.grid, self.values.mapv(f))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub(crate) fn same_grid(&self, other: &Field, what: &str) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape(format!("{what}: fields live on different grids")));
        }
        Ok(())
    }
}

pub(crate) fn check_finite(values: &Array2<f64>, context: &str) -> Result<()> {
    if let Some(((i, j), &value)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { context: context.to_string(), i, j, value });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grid_node_counts() {
        let g = Grid::new(-1.0, 1.0, 1.0, 0.1, 0.1, 0.6).unwrap();
        assert_eq!((g.nx, g.nt), (21, 11));
        let g = Grid::new(-1.0, 1.0, 2.0, 0.1, 0.1, 0.5).unwrap();
        assert_eq!((g.nx, g.nt), (21, 21));
    }

    #[test]
    fn non_dividing_step_names_axis() {
        let err = Grid::new(-1.0, 1.0, 1.0, 0.3, 0.1, 0.5).unwrap_err();
        assert!(err.to_string().contains("x step"), "{err}");
        let err = Grid::new(-1.0, 1.0, 1.0, 0.1, 0.3, 0.5).unwrap_err();
        assert!(err.to_string().contains("t step"), "{err}");
    }

    #[test]
    fn gamma_must_be_open_unit_interval() {
        assert!(Grid::new(-1.0, 1.0, 1.0, 0.1, 0.1, 0.0).is_err());
        assert!(Grid::new(-1.0, 1.0, 1.0, 0.1, 0.1, 1.0).is_err());
        assert!(Grid::new(-1.0, 1.0, 1.0, 0.1, 0.1, -0.2).is_err());
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(Grid::new(1.0, -1.0, 1.0, 0.1, 0.1, 0.5).is_err());
        assert!(Grid::new(-1.0, 1.0, 0.0, 0.1, 0.1, 0.5).is_err());
        assert!(Grid::new(-1.0, 1.0, 1.0, -0.1, 0.1, 0.5).is_err());
    }

    #[test]
    fn coordinates_do_not_drift() {
        let g = Grid::new(-1.0, 1.0, 1.0, 0.001, 0.001, 0.5).unwrap();
        assert_eq!(g.x(g.nx - 1), 1.0);
        assert_eq!(g.x(1000), 0.0);
        assert_eq!(g.t(g.nt - 1), 1.0);
    }

    #[test]
    fn gamma_slab_count() {
        let g = Grid::standard(1.0).unwrap();
        // 0.6 / 0.1 evaluates to 5.999..., the slab still holds t = 0.6
        assert_eq!(g.gamma_nt(), 7);
        let g = g.with_gamma(0.55).unwrap();
        assert_eq!(g.gamma_nt(), 6);
    }

    #[test]
    fn field_from_fn_samples_nodes() {
        let g = Grid::standard(1.0).unwrap();
        let zero = Field::from_fn(g, |_, _| 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let u = Field::from_fn(g, |x, t| (x * x - 1.0).powi(2) * (t * t + 1.0)).unwrap();
        assert_eq!(u.at(0, 0), 0.0);
        assert_eq!(u.at(10, 0), 1.0);

        let v = Field::from_fn(g, |x, t| 0.1 * (2.0 * std::f64::consts::PI * x).cos() * (t + 1.0)).unwrap();
        assert!((v.at(10, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn field_from_fn_rejects_non_finite() {
        let g = Grid::standard(1.0).unwrap();
        let err = Field::from_fn(g, |x, t| if x > 0.45 && t > 0.25 { f64::NAN } else { 1.0 }).unwrap_err();
        match err {
            Error::NonFinite { i, j, .. } => assert_eq!((i, j), (15, 3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn slices() {
        let g = Grid::standard(1.0).unwrap();
        let zero = Field::zeros(g);
        assert_eq!(zero.slice_at_time(0).unwrap(), vec![0.0; 21]);

        let fx = Field::from_fn(g, |x, _| x).unwrap();
        for j in [0, 5, 10] {
            assert_eq!(fx.slice_at_time(j).unwrap(), g.xs().to_vec());
        }
        assert!(fx.slice_at_time(11).is_err());

        let u = Field::from_fn(g, |x, t| (x * x - 1.0).powi(2) * (t * t + 1.0)).unwrap();
        let mut s = u.slice_at_time(0).unwrap();
        for (i, v) in s.iter().enumerate() {
            assert_eq!(*v, (g.x(i).powi(2) - 1.0).powi(2));
        }
        s[3] = 99.0;
        assert_ne!(u.at(3, 0), 99.0);
    }

    #[test]
    fn trapezoid_weights_sum_to_extent() {
        let g = Grid::standard(1.0).unwrap();
        assert!((g.x_weights().sum() - 2.0).abs() < 1e-14);
        assert!((g.t_weights().sum() - 1.0).abs() < 1e-14);
        assert!((g.space_time_weights().sum() - 2.0).abs() < 1e-14);
    }
}
