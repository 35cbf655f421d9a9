pub mod aggregator;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod scenario;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Gradients, Tensor};
