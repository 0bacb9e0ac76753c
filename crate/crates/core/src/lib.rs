//! Spatio-temporal multi-modal fusion network for video salient object detection.

pub mod bma;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod ila;
pub mod ilw;
pub mod loss;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
