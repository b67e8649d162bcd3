//! Attention-constrained, causally deconfounded facial action unit detection.

pub mod align;
pub mod attention;
pub mod causal;
pub mod dataset;
pub mod error;
pub mod image;
pub mod landmarks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prior;
pub mod rules;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
