pub mod autograd;
pub mod checkpoint;
pub mod diifi;
pub mod disco;
pub mod error;
pub mod eval;
pub mod harness;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod shift;
pub mod tensor;

pub use error::{FicoError, Result};
pub use tensor::{Scalar, Tensor};
