//! Repair of two-level lattice (TLL) ReLU controllers for discrete-time
//! control-affine systems.

pub mod bounds;
pub mod demo;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod repair;
pub mod socp;
pub mod tll;

pub use error::{Error, Result};
