//! Geometric defect analysis of linear octupole RF ion traps.
//!
//! Electrode mis-positioning is decomposed onto five defect classes, mapped to
//! quadrupole and dipole perturbations of the octupole potential, checked against an
//! independent boundary-value solver, and compensated by per-electrode RF biases.

pub mod analytic;
pub mod compensation;
pub mod experiments;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod optim;
pub mod pattern;
pub mod plot;
pub mod roots;
pub mod solver;

pub use error::{Result, TrapError};
