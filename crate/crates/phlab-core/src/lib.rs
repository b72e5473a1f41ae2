//! Core library for pseudo-Hamiltonian system identification.
//!
//! A pseudo-Hamiltonian model explains observed dynamics as
//!
//! ```text
//!     dx/dt = (S - R) ∇H(x) + f(x, t)
//! ```
//!
//! where `S` is a fixed skew-symmetric structure matrix, `R` is a diagonal
//! damping matrix, `H` is a scalar energy function and `f` is an external
//! force. `R`, `H` and `f` can each be either a known closed form or a small
//! trainable component; learning them from sampled trajectories is the point
//! of this crate.
//!
//! The crate is `no_std` (with `alloc`) so the models and integrators can be
//! embedded anywhere; file formats, the CLI and the experiment drivers live
//! in the companion `phlab` crate.
//!
//! Module map:
//!
//! * [`params`] — flat parameter vector shared by all trainable parts
//! * [`net`] — the dense scalar network and its closed-form input gradient
//! * [`tape`] — reverse-mode autodiff over vector-valued expressions
//! * [`model`] — pseudo-Hamiltonian and baseline dynamics models
//! * [`system`] — ground-truth benchmark systems (mass-spring, tank network)
//! * [`integrator`] — one-step discretizations, residuals and rollouts
//! * [`dataset`] — trajectory sampling and (state, next-state) pair extraction
//! * [`train`] — discretized one-step loss, Adam loop, model evaluation
//! * [`mpc`] — gradient-based model-predictive control on a learned model

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod dataset;
pub mod error;
pub mod fd;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod net;
pub mod params;
pub mod rng;
pub mod system;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
