//! VeTTA: a two-stage transformer autoencoder for tree-structured
//! curvilinear geometry.
//!
//! Stage one (`vessel_ae`) embeds a single vessel segment into a 64-d code
//! and decodes continuous `(x, y, z, r)` along the segment as a residual to
//! linear interpolation. Stage two (`tree_ae`) embeds whole vessel trees and
//! decodes them recursively, one node expansion at a time, which guarantees
//! tree-structured output. Supporting modules cover the differentiable
//! numerics substrate, geometry primitives, synthetic data, set matching,
//! evaluation metrics, and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod recursive;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tree;
pub mod tree_ae;
pub mod vessel_ae;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{GradMap, Tensor};
