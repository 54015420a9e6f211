//! Two-lane Aw-Rascle-Zhang traffic model with backstepping boundary control.
//!
//! The crate covers the physics ([`model`]), time stepping of the nonlinear
//! and linearized plants ([`pde_sim`]), the Goursat kernel solvers
//! ([`kernels`]), variable-speed-limit feedback and the collocated observer
//! ([`control`]), and scenario orchestration with file output ([`harness`]).

pub mod control;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod pde_sim;

pub use error::{Error, Result};
pub use grid::Grid;
pub use model::{
    characteristic_to_physical, compute_steady_state, compute_steady_state_with, equilibrium_speed,
    fundamental_diagram_samples, linearize, physical_to_characteristic, pressure, CharField, Lane,
    LinearCoeffs, ModelParams, SteadyOptions, SteadyState, TrafficField,
};
