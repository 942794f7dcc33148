//! Group-sensitive triplet embedding learning.
//!
//! Triplet losses with mean-valued anchors and intra-class group terms,
//! per-class k-means grouping, group-aware batch sampling, a small
//! trainable embedding with manual backpropagation, and retrieval
//! metrics.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grouping;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{FeatureMatrix, RngSeed};
