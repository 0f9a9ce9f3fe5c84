//! Block-based statistics (BBS) for voxel-wise group comparison of
//! vector-valued 3D images.
//!
//! The pipeline corrects residual local misalignment by non-local block
//! matching, compares groups with a weighted Hotelling T² permutation test,
//! and controls multiplicity with resampling-based corrections. A synthetic
//! diffusion-phantom generator and accuracy metrics support validation.

pub mod blockmatch;
pub mod error;
pub mod eval;
pub mod multiplicity;
pub mod pipeline;
pub mod refselect;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
