//! Temporal functional factor analysis.
//!
//! Estimates the global (low-rank, long-range) component of the average
//! spatial covariance of a collection of spatiotemporal scans by masked
//! covariance completion, explores the recovered subspace with orthogonal
//! and oblique rotations, sparsifies the loadings by cross-validated
//! smoothing and shrinkage, and estimates smooth subject-level factor
//! curves by penalized function-on-scalar regression.

pub mod completion;
pub mod covassembly;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod loadings;
pub mod pipeline;
pub mod postprocess;
pub mod rotation;
pub mod scores;
pub mod simgen;

pub use error::{Error, Result};
