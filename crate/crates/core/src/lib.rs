//! Symmetric exclusion on a discrete torus with one slow bond: exact and
//! Monte Carlo dynamics, the limiting heat equations, closed-form variances
//! and the statistical checks that tie them together.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod closed_forms;
pub mod engine;
pub mod error;
pub mod generator;
pub mod io;
pub mod lattice;
pub mod pde;
pub mod quadrature;
pub mod rng;
pub mod sbeta;
pub mod special;
pub mod stats;
pub mod tridiag;

pub use error::{Error, Result};
