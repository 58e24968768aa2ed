//! Shape sensitivity and random-domain uncertainty propagation for the heat
//! equation.
//!
//! The crate computes material and shape derivatives of heat-equation
//! solutions under boundary perturbations `x ↦ x + εV(x)`, and propagates
//! random boundary amplitudes to second moments of the solution with two
//! independent routes: Monte Carlo over perturbed finite-element solves and a
//! tensorized space-time boundary integral equation.

pub mod bem;
pub mod benchmark;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod kinematics;
pub mod moments;
pub mod quadrature;
pub mod random_boundary;
pub mod sensitivity;
pub mod sparse;
pub mod special;
pub mod verification;

pub use error::{Error, Result};
pub use geometry::{Mat, Point};
