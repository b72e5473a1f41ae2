//! Filesystem, parallelism, and experiment layers on top of [`phlab_core`].
//!
//! The core crate is `no_std` and holds the numerics: models, integrators,
//! the training loop, and the controller. This crate adds everything that
//! needs an operating system — dataset and checkpoint files, CSV/JSON result
//! emission, rayon-parallel replicate fan-out, and the experiment drivers
//! behind the `phlab` binary.

pub use phlab_core as core;

pub mod experiments;
pub mod io;
pub mod trainer;
