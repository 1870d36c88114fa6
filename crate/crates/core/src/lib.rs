//! Residual deep Gaussian processes on hyperspheres.
//!
//! Layers map points of `S_d` to tangent vectors, and each hidden layer moves
//! its input along the sampled field through the exponential map. The crate
//! provides the geometric primitives, spherical harmonics, Matérn kernels for
//! scalar and vector fields, interdomain and inducing-location variational
//! families, and an analytic-gradient trainer.

pub mod error;
mod features;
pub mod gvf;
pub mod harmonics;
pub mod kernels;
mod jet;
pub mod model;
pub mod params;
pub mod sphere;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
