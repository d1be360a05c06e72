//! Mixed H₂/H∞ synthesis and verification for mean-field linear stochastic
//! systems with deterministic affine terms.
//!
//! The crate solves the finite-horizon problem three ways:
//!
//! * [`brl`] decides whether the disturbance-to-output operator has norm below
//!   a level γ and computes the worst-case disturbance,
//! * [`openloop`] builds the open-loop Nash strategy for a fixed initial law,
//! * [`closedloop`] synthesizes the closed-loop Nash feedback pair.
//!
//! Every result can be cross-checked with [`mcsim`] (Euler–Maruyama Monte
//! Carlo) and [`oracle`] (exact scenario-tree and dynamic-programming
//! computations on the time-discretized problem).

pub mod brl;
pub mod cli;
pub mod closedloop;
pub mod error;
pub mod mcsim;
pub mod model;
pub mod numerics;
pub mod openloop;
pub mod oracle;

pub use error::{Error, InfeasibleReason, Result};
pub use model::{InitialLaw, MFSystem, SolverSettings};
pub use numerics::{Mat, MatrixTrajectory, TimeGrid};
