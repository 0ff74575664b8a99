//! Zero-shot person identification from either images or attribute vectors.
//!
//! Images and attribute descriptions meet in one shared space: an attention
//! module turns a feature map into a visual feature, a small perceptron turns a
//! per-identity attribute vector into a prototype, and an angular-margin
//! softmax pulls the two together during episodic training. One trained model
//! serves every protocol in [`recognition`].

pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod plm;
pub mod recognition;
pub mod sgsa;
pub mod sweep;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use numeric::{Scalar, Tape, Tensor, Var};
