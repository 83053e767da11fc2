//! Narrow-angle parabolic-equation propagation in a lossy rectangular tunnel.
//!
//! The solver marches a complex envelope `u(z, x)` along the tunnel axis `z`
//! over a transverse (height) grid `x` using a Crank–Nicolson finite-difference
//! scheme. The tunnel floor and ceiling are closed with a Leontovich impedance
//! condition derived from the wall's complex permittivity. Column energies are
//! trapezoidal sums of `|u|^2 dx`.

mod environment;
mod solver;
pub mod validation;

pub use environment::{
    complex_permittivity, Polarization, SourceSpec, TunnelEnvironment, EPSILON_0, SPEED_OF_LIGHT,
};
pub use solver::{
    column_energy, init_gaussian_source, march_step, march_step_with, received_power_line, solve, to_field_image,
    ComplexFieldSlice, CrankNicolson, Solver, WallClosure, DEFAULT_FLOOR_DB, DEFAULT_GRID_CAP,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PweError {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error("column length {got} does not match grid height {expected}")]
    ColumnLength { expected: usize, got: usize },
    #[error("grid of {points} points exceeds the cap of {cap}")]
    GridTooLarge { points: usize, cap: usize },
    #[error("singular tridiagonal system at row {0}")]
    SingularSystem(usize),
    #[error("field slice has no non-zero sample to use as reference level")]
    ZeroField,
    #[error("floor_db must be negative, got {0}")]
    InvalidFloor(f64),
    #[error("height {0} m lies outside the transverse domain")]
    HeightOutOfDomain(f64),
}
