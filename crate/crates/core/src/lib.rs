//! Forecasting a 1-D mean field games system from initial data by minimizing a
//! Carleman-weighted convexification functional.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod carleman;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod grid;
pub mod io;
pub mod model;
pub mod objective;
pub mod optimizer;

pub use carleman::ConvexParams;
pub use error::{Error, Result};
pub use exec::Exec;
pub use grid::{Field, Grid};
pub use model::{IdealCase, Kernel, ProblemSpec};
