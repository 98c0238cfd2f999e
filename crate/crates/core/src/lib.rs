pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod phantom;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor4};
