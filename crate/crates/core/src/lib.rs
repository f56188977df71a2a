//! Numerical verification of first- and second-order necessary conditions for
//! stochastic optimal control problems with control and initial-state
//! constraints.
//!
//! The crate simulates a controlled SDE along a candidate control, solves the
//! variational and adjoint equations, builds tangent and normal cones of the
//! constraint sets, and evaluates each necessary condition as a Monte Carlo
//! estimate with a verdict.

pub mod adjoint;
pub mod coeffs;
pub mod conditions;
pub mod config;
pub mod cones;
pub mod error;
pub mod export;
pub mod fixtures;
pub mod linalg;
pub mod problem;
pub mod regression;
pub mod run;
pub mod sde;
pub mod variational;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod ch01 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/problems.md")]
mod ch02 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulation.md")]
mod ch03 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/variations.md")]
mod ch04 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/adjoints.md")]
mod ch05 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cones.md")]
mod ch06 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/conditions.md")]
mod ch07 {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod ch08 {}
