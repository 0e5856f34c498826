pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod executor;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod rectify;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::MaskMatrix;
pub use tensor::Tensor;
