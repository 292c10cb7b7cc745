//! Fast approximate solvers for parametric constrained optimization, built
//! from a neural predictor and a differentiable feasibility-seeking
//! correction step.
//!
//! The pipeline: a problem family fixes objective and constraint structure;
//! instances differ only in the equality right-hand side `x`. An MLP maps
//! `x` to a candidate solution, a feasibility-seeking solver drives the
//! constraint violation of that candidate to (near) zero, and training
//! differentiates through the unrolled solver iterations so the predictor
//! learns warm starts whose corrections are both feasible and close to
//! optimal.
//!
//! Module map:
//! - [`autodiff`]: vector-valued reverse-mode tape.
//! - [`algebra`]: write-once formulas evaluated plainly or on the tape.
//! - [`problems`]: problem families (QP / QCQP / SOCP, convex and not),
//!   instance sampling, objectives, violations and their gradients.
//! - [`fs`]: feasibility-seeking solvers (gradient descent, L-BFGS) and
//!   their differentiable unrolled forms.
//! - [`net`]: the MLP predictor.
//! - [`train`]: losses, optimizers, the training loop, sweeps.
//! - [`oracle`]: reference solvers (augmented Lagrangian, grid search) and
//!   optimality gaps.
//! - [`bench`]: datasets, evaluation, metrics, timing.
//! - [`checks`]: self-contained invariant suites behind `feasnet check`.

// The numeric kernels index rows and columns explicitly on purpose: the
// loops mirror the math and usually walk several arrays in lockstep.
#![allow(clippy::needless_range_loop)]

pub mod algebra;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
mod error;
pub mod fs;
pub mod kernels;
pub mod net;
pub mod oracle;
pub mod problems;
mod rawio;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
