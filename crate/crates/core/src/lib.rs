//! Dual-tree false-negative identification and multi-view hard negative
//! sampling for implicit collaborative filtering.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fni;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod sparse;
pub mod spectral;
pub mod synth;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
