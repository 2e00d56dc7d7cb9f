//! Weather-time aware destination classification and destination-adapted
//! trajectory prediction for pedestrians.

pub mod classifier;
pub mod cluster;
pub mod data;
pub mod datp;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod pipeline;
pub mod stats;

pub use error::{Error, ErrorClass, Result};
