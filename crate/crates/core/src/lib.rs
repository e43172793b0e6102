pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod model;
pub mod mscan;
pub mod part_losses;
pub mod pipeline;
pub mod scalar;
pub mod stn;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor};
