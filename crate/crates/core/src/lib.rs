pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
mod nn;
pub mod prompt;
pub mod trainer;

pub use error::{DpmnError, Result};
