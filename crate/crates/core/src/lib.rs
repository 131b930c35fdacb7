//! Robust non-rigid registration of a source surface to a target point set.
//!
//! The source deforms through an embedded deformation graph whose nodes carry
//! affine transforms. The transforms minimize a Welsch-robust alignment and
//! regularization energy with a majorization-minimization solver whose
//! fixed-point iteration is sped up by Anderson acceleration.

pub mod energy;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod synth;

pub use error::{Error, ErrorKind, Result};

/// 3-vector used for positions and displacements throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
