pub mod codec;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
