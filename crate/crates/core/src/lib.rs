//! A3Net: anatomy-aware radiology report generation on a small, dependency-light
//! autodiff core.

pub mod ablation;
pub mod alignment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod vision;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::Tensor;
