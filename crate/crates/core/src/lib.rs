pub mod cli;
pub mod codec;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
