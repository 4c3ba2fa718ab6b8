//! Gain-function approximation for the feedback particle filter.
//!
//! The gain `K = grad phi` solves the weighted Poisson equation
//! `-(1/rho) div(rho grad phi) = h - h_hat` where `rho` is known only through
//! particles. Two particle-only solvers are provided:
//!
//! - [`galerkin`]: empirical Galerkin projection onto a polynomial basis.
//! - [`kernel`]: a diffusion-kernel Markov matrix on the particles and a
//!   fixed-point iteration on it.
//!
//! [`density`] supplies the Gaussian-mixture densities, seeded sampling and
//! the exact scalar oracle; [`fpf`] runs the feedback particle filter with
//! either gain next to a Kalman-Bucy baseline and the exact posterior.

pub mod density;
pub mod error;
pub mod fpf;
pub mod galerkin;
pub mod kernel;

pub use density::{
    exact_scalar_solution, poisson_residual, sample, Component, DensityModel, GridSpec,
    ObservationFunction, ParticleEnsemble, ScalarExactSolution,
};
pub use error::{GainError, Result};
