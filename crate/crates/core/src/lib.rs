//! Planner and simulator for adaptive FP8/FP4 mixed-precision training.

pub mod checkpoint;
mod decimal;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod quant;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Result, SnipError};
pub use quant::{FloatFormat, Granularity, QuantResult, QuantSpec, Rounding};
pub use rng::RngStream;
pub use tensor::Tensor;
