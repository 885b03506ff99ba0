//! Large-sampling-field dynamic filtering on a small deterministic tensor
//! engine, with receptive-field measurement and a synthetic optical-flow
//! training harness.

pub mod checkpoint;
pub mod checks;
pub mod conv;
pub mod erf;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod layer;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
