//! Desk-scale laboratory for fine-grained sketch→photo retrieval with triplet
//! metric learning.

pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod retrieval;
pub mod sampling;
pub mod seeds;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
