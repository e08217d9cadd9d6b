pub mod attacks;
pub mod data;
pub mod detectors;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
