pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod flow;
pub mod nn;
pub mod optim;
pub mod shaping;
pub mod tdw;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
