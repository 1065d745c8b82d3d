//! Runtime trustworthiness scoring for black-box image classifiers.
//!
//! A prediction is explained by occlusion (or by its own bounding box), the image is
//! scanned for monitored features, and the Trustworthiness in Classification Score
//! (TCS) measures how much of each detected feature the explanation relies on. The
//! [`eval`] module compares TCS-based acceptance against ground truth.

pub mod classifier;
pub mod cli;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod features;
pub mod imaging;
pub mod pipeline;
pub mod protocol;
pub mod synth;
pub mod tcs;

pub use error::{Error, Result};
