//! Two-dimensional unstable manifolds of periodic orbits and equilibria by
//! orbit continuation: a one-parameter family of solutions to an
//! under-determined multiple-shooting boundary value problem, traced with
//! pseudo-arclength continuation and a matrix-free Newton-Krylov corrector.
//!
//! Module map:
//! - [`ode`]: adaptive integration, variational equations, event location.
//! - [`stability`]: periodic-orbit refinement and leading Floquet pair.
//! - [`krylov`]: Householder GMRES and the iteration-bound check.
//! - [`bvp`]: multiple-shooting residual and bordered Jacobian action.
//! - [`continuation`]: predictor-corrector driver and manifold mesh.
//! - [`models`]: bundled vector fields.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bvp;
pub mod continuation;
pub mod error;
pub mod krylov;
pub(crate) mod linalg;
pub mod models;
pub mod ode;
pub mod stability;

pub use error::{Error, Result};
