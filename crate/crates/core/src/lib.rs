pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod image;
pub mod metric;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Ctx, ParameterStore, Scalar, SeededRng, Tape, Tensor};
