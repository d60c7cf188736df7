//! 2+1D decomposition pipeline for 3D volume classification.
//!
//! A probability-map volume is split into eight neighbor-offset
//! sub-volumes, sliced along three views, and passed slice by slice through
//! a frozen 2D extractor. The eight feature stacks are max-pooled, reduced
//! to the most active slices and channels learned on training subjects, and
//! classified by a small 1D network per (metric, view) branch. Branch
//! probabilities are fused by weighted voting and evaluated with repeated
//! stratified k-fold cross-validation.

pub mod cv;
pub mod decomposition;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod net1d;
pub mod pooling;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
