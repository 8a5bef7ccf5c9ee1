//! Generative-counterfactual domain generalization for RF-based 3D human pose
//! estimation.
//!
//! Conditional generators learn `p(signal | skeleton)`; synthesizing the same
//! sample with each bone removed and subtracting isolates per-bone signal
//! effects, which cancels condition-independent (domain) structure. The
//! aggregated difference regularizes an encoder-decoder pose estimator.

pub mod adversarial;
pub mod backbone;
pub mod checkpoint;
pub mod counterfactual;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod hpe;
pub mod metrics;
pub mod nn;
pub mod skeleton;
pub mod train;

pub use error::{Error, ErrorKind, Result};
