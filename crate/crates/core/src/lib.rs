//! Semantic TSDF mapping with calibrated label fusion.

pub mod cache;
pub mod error;
pub mod exec;
pub mod frames;
pub mod fusion;
pub mod geom;
pub mod glfs;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod planar;
pub mod scaling;
pub mod simulator;
pub mod tsdf;

pub use error::{Error, Result};
