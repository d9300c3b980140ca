//! Cost-aware routing of image patches among segmentation models of
//! increasing size, trained with a policy gradient.

pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod tensorkit;
pub mod training;

pub use error::{Error, Result};
