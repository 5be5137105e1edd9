//! Boundary-integral workbench for Laplace layer potentials on Lipschitz and
//! flat boundaries.

pub mod dyadic;
pub mod error;
pub mod flatness;
pub mod geometry;
pub mod linalg;
pub mod lipgraph;
pub mod potentials;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
