pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
