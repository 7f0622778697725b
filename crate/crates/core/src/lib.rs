pub mod batchnorm;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod personalize;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
