//! Hybrid CNN-RNN surrogate modelling of urban flood depths.

pub mod autodiff;
pub mod bayesopt;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod synthdata;
pub mod terrain;
pub mod trainer;

pub use error::{Error, Result};
