pub mod autograd;
pub mod camera;
pub mod encoder;
pub mod data;
pub mod detection;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod lidar;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
